import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from savae import autodiff as ad  # noqa: E402
from savae.corpus import ParallelExample, build_vocabs, numericalize  # noqa: E402
from savae.model import ModelConfig, SavaeParams  # noqa: E402

SENTENCES = [
    ("the dog walked .", "DT NN VBD ."),
    ("a cat jumps quickly .", "DT NN VBZ RB ."),
    ("John watched the bird .", "NNP VBD DT NN ."),
    ("they talk .", "PRP VBP ."),
    ("the old farmer is cooking in the house .", "DT JJ NN VBZ VBG IN DT NN ."),
    ("Mary played .", "NNP VBD ."),
]


def make_examples(pairs=SENTENCES):
    return [ParallelExample(tuple(x.split()), tuple(y.split())) for x, y in pairs]


def small_config(vocabs, **overrides) -> ModelConfig:
    dims = dict(
        text_emb=8, syntax_emb=6, enc_z_hidden=10, enc_sx_hidden=9, enc_sy_hidden=7,
        dec_x_hidden=11, dec_y_hidden=7, d_z=4, d_s=3,
    )
    dims.update(overrides)
    return ModelConfig(len(vocabs[0]), len(vocabs[1]), **dims)


@pytest.fixture
def examples():
    return make_examples()


@pytest.fixture
def vocabs(examples):
    return build_vocabs(examples)


@pytest.fixture
def small_params(vocabs):
    return SavaeParams.init(small_config(vocabs), seed=3)


@pytest.fixture
def batch(examples, vocabs):
    return numericalize(examples, *vocabs)


@pytest.fixture(autouse=True)
def _fresh_graph():
    ad.reset_graph()
    yield
    ad.reset_graph()


def perturb(params: SavaeParams, seed: int = 0, scale: float = 0.3) -> SavaeParams:
    """Spread the weights beyond the small init so outputs are not near-uniform."""
    rng = np.random.default_rng(seed)
    for t in params.parameters():
        t.data += rng.uniform(-scale, scale, size=t.shape).astype(np.float32)
    return params


# acceptance criteria record their verdicts here; printed at the end of the run
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {verdict}  {title}" + (f"  [{detail}]" if detail else ""))
