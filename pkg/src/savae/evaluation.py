"""Reconstruction NLL/PPL, syntax recall, edit distance, diversity and the verb probe."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ContractError
from .corpus import ParallelExample, Vocab, numericalize
from .decoding import reconstruct
from .model import SavaeParams, decode_x_nll, encode_s_from_x, encode_z, kl_gaussian_standard
from .tagger import PerceptronTagger

VERB_TAGS = ("VBD", "VBZ", "VBP", "VBG", "VBN")
SETTINGS = {
    # name: (z_mode, s_mode)
    "mean": ("mean", "mean"),
    "std": ("sample", "sample"),
    "fix_z": ("mean", "sample"),
    "fix_s": ("sample", "mean"),
}


@dataclass
class EvalReport:
    nll_total: float  # nats summed over all target tokens (EOS included)
    token_count: int
    n_sentences: int
    kl_z: float = 0.0  # mean per sentence, logged only
    kl_s: float = 0.0

    @property
    def ppl(self) -> float:
        return math.exp(self.nll_total / self.token_count)

    @property
    def nll(self) -> float:
        """Mean reconstruction NLL per sentence."""
        return self.nll_total / self.n_sentences

    @property
    def nll_per_token(self) -> float:
        return self.nll_total / self.token_count

    def line(self) -> str:
        return f"nll={self.nll:.6f} ppl={self.ppl:.6f} tokens={self.token_count}"


def eval_nll_ppl(
    params: SavaeParams,
    examples: Sequence[ParallelExample],
    vocabs: tuple[Vocab, Vocab],
    batch_size: int = 64,
) -> EvalReport:
    """Teacher-forced reconstruction NLL with z and s at their posterior means (s from text)."""
    if not examples:
        raise ContractError("cannot evaluate an empty split")
    text_vocab = vocabs[0]
    total = 0.0
    kl_z = kl_s = 0.0
    tokens = 0
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            batch = numericalize(chunk, text_vocab, None)
            pz = encode_z(params, batch.x)
            ps = encode_s_from_x(params, batch.x) if params.config.has_syntax else None
            nll = decode_x_nll(params, pz.mean, ps.mean if ps is not None else None, batch.x)
            total += float(np.sum(nll.data, dtype=np.float64))
            tokens += int(batch.x.lengths.sum()) + len(chunk)
            kl_z += float(np.sum(kl_gaussian_standard(pz).data, dtype=np.float64))
            if ps is not None:
                kl_s += float(np.sum(kl_gaussian_standard(ps).data, dtype=np.float64))
    n = len(examples)
    return EvalReport(total, tokens, n, kl_z / n, kl_s / n)


# ---------------------------------------------------------------------------
# sequence metrics
# ---------------------------------------------------------------------------


def levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Unit-cost insert/delete/substitute distance between two token sequences."""
    codes: dict[Hashable, int] = {}
    ia = np.array([codes.setdefault(t, len(codes)) for t in a], dtype=np.int64)
    ib = np.array([codes.setdefault(t, len(codes)) for t in b], dtype=np.int64)
    return kernels.edit_distance(ia, ib)


def recall_at_k(predictions: Sequence[Sequence[Sequence[str]]], golds: Sequence[Sequence[str]], k: int) -> float:
    """Fraction of examples whose gold sequence appears among the first ``k`` predictions."""
    if k < 1:
        raise ContractError("K must be >= 1")
    if len(predictions) != len(golds):
        raise ContractError("predictions and golds differ in length")
    if not golds:
        return 0.0
    hits = sum(tuple(g) in {tuple(p) for p in preds[:k]} for preds, g in zip(predictions, golds))
    return hits / len(golds)


def mean_levenshtein(predictions: Sequence[Sequence[Sequence[str]]], golds: Sequence[Sequence[str]]) -> float:
    """Average distance between the top prediction and the gold sequence."""
    dists = [levenshtein(preds[0] if preds else [], g) for preds, g in zip(predictions, golds)]
    return float(np.mean(dists)) if dists else 0.0


# ---------------------------------------------------------------------------
# generation-based probes
# ---------------------------------------------------------------------------


def syntax_diversity(
    params: SavaeParams,
    examples: Sequence[ParallelExample],
    vocabs: tuple[Vocab, Vocab],
    tagger: PerceptronTagger,
    setting: str = "std",
    n_samples: int = 10,
    rng: np.random.Generator | None = None,
    decode: str = "greedy",
    max_len: int = 50,
) -> list[int]:
    """Per example, the number of distinct tag sequences among ``n_samples`` reconstructions.

    ``setting`` picks which latent is sampled from its posterior: ``std``
    (both), ``fix_z`` (z at its mean, s sampled), ``fix_s`` (s at its mean, z
    sampled) or ``mean`` (neither).
    """
    if setting not in SETTINGS:
        raise ContractError(f"unknown setting {setting!r}; choose from {sorted(SETTINGS)}")
    z_mode, s_mode = SETTINGS[setting]
    outs = reconstruct(
        params, examples, vocabs, z_mode=z_mode, s_mode=s_mode, decode=decode,
        max_len=max_len, rng=rng, n_samples=n_samples,
    )
    return [count_unique_structures(samples, tagger) for samples in outs]


def count_unique_structures(samples: Sequence[Sequence[str]], tagger: PerceptronTagger) -> int:
    return len({tuple(tagger.tag(s)) for s in samples})


def verb_types(tags: Sequence[str]) -> set[str]:
    return {t for t in tags if t in VERB_TAGS}


def modify_verbs(tags: Sequence[str], target: str) -> tuple[str, ...]:
    return tuple(target if t in VERB_TAGS else t for t in tags)


@dataclass
class ProbeRow:
    target: str
    total: int
    matched: int
    base_matched: int  # unmodified reconstructions already showing the target

    @property
    def rate(self) -> float:
        return self.matched / self.total if self.total else 0.0

    @property
    def base_rate(self) -> float:
        return self.base_matched / self.total if self.total else 0.0


@dataclass
class ProbeReport:
    rows: list[ProbeRow]
    n_selected: int
    n_filtered: int
    tagger_accuracy: float | None = None
    outputs: dict[str, list[list[str]]] = field(default_factory=dict, repr=False)

    def lines(self) -> list[str]:
        out = ["target_tag\ttotal\tmatched\trate"]
        out += [f"{r.target}\t{r.total}\t{r.matched}\t{r.rate:.6f}" for r in self.rows]
        return out


def select_single_verb_type(examples: Sequence[ParallelExample]) -> tuple[list[ParallelExample], int]:
    keep = [e for e in examples if len(verb_types(e.y)) == 1]
    return keep, len(examples) - len(keep)


def output_verb_type(tokens: Sequence[str], tagger: PerceptronTagger) -> str | None:
    """The single verb type of a generated sentence, or None for zero or several."""
    types = verb_types(tagger.tag(tokens)) if tokens else set()
    return next(iter(types)) if len(types) == 1 else None


def verb_modification_probe(
    params: SavaeParams,
    examples: Sequence[ParallelExample],
    vocabs: tuple[Vocab, Vocab],
    tagger: PerceptronTagger,
    targets: Sequence[str] = VERB_TAGS,
    decode: str = "greedy",
    max_len: int = 50,
    tagger_accuracy: float | None = None,
) -> ProbeReport:
    """Rewrite every verb tag to each target, infer s from the edited syntax, decode with z at its mean.

    Only examples whose gold syntax holds exactly one verb type are used. A
    generation counts as matched when its tagged verb type is the target.
    ``base_matched`` counts the same thing for reconstructions from the
    unedited syntax.
    """
    selected, filtered = select_single_verb_type(examples)
    report = ProbeReport([], len(selected), filtered, tagger_accuracy)
    if not selected:
        report.rows = [ProbeRow(t, 0, 0, 0) for t in targets]
        return report
    base = reconstruct(params, selected, vocabs, s_source="from_y", decode=decode, max_len=max_len)
    base_types = [output_verb_type(o[0], tagger) for o in base]
    report.outputs["original"] = [o[0] for o in base]
    for target in targets:
        edited = [ParallelExample(e.x, modify_verbs(e.y, target)) for e in selected]
        outs = reconstruct(params, edited, vocabs, s_source="from_y", decode=decode, max_len=max_len)
        matched = sum(output_verb_type(o[0], tagger) == target for o in outs)
        base_matched = sum(t == target for t in base_types)
        report.rows.append(ProbeRow(target, len(selected), matched, base_matched))
        report.outputs[target] = [o[0] for o in outs]
    return report


# ---------------------------------------------------------------------------
# latent export
# ---------------------------------------------------------------------------


def syntactic_means(params: SavaeParams, examples: Sequence[ParallelExample], vocabs, batch_size: int = 64) -> np.ndarray:
    rows = []
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = numericalize(examples[start : start + batch_size], vocabs[0], None)
            rows.append(encode_s_from_x(params, batch.x).mean.data)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, params.config.d_s), np.float32)


def export_latents(params: SavaeParams, examples: Sequence[ParallelExample], vocabs, path) -> int:
    """Write ``id, s_0..s_{d-1}, length, syntax`` per sentence (s = posterior mean from text)."""
    mu = syntactic_means(params, examples, vocabs)
    d = mu.shape[1]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"s_{j}" for j in range(d)] + ["length", "syntax"])
        for i, (ex, row) in enumerate(zip(examples, mu)):
            w.writerow([i] + [str(v) for v in row] + [len(ex.x), " ".join(ex.y)])
    return len(examples)


def read_latents(path) -> tuple[np.ndarray, list[int], list[str]]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = len(header) - 3
        rows, lengths, syntax = [], [], []
        for rec in r:
            rows.append([np.float32(v) for v in rec[1 : 1 + d]])
            lengths.append(int(rec[1 + d]))
            syntax.append(rec[2 + d])
    return np.array(rows, dtype=np.float32).reshape(-1, d), lengths, syntax
