"""Command-line entry point: ``savae <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error (corpus, checkpoint, I/O),
3 numeric failure (divergence, non-finite values).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import CorpusError, build_vocab, load_corpus, write_corpus
from .decoding import default_max_len, infer_syntax, parse_decode_mode, reconstruct, sample_prior
from .evaluation import (
    VERB_TAGS,
    eval_nll_ppl,
    export_latents,
    modify_verbs,
    verb_modification_probe,
)
from .model import ModelConfig
from .tagger import PerceptronTagger, train_tagger
from .training import CheckpointError, NonFiniteGradient, TrainConfig, TrainingDiverged, load_checkpoint, train

log = logging.getLogger("savae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig) if not f.name.endswith("vocab_size"))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


def _defaults() -> dict:
    probe = ModelConfig(1, 1)
    out = {k: getattr(probe, k) for k in MODEL_KEYS}
    tc = TrainConfig()
    out.update({k: getattr(tc, k) for k in TRAIN_KEYS})
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; later keys win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(pairs: dict[str, str]) -> tuple[TrainConfig, dict]:
    """Typed TrainConfig plus model dims from raw pairs; unknown keys are rejected."""
    defaults = _defaults()
    unknown = sorted(set(pairs) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    values = dict(defaults)
    for key, raw in pairs.items():
        kind = type(defaults[key])
        try:
            values[key] = kind(raw)
        except ValueError:
            raise UsageError(f"config key {key}: cannot parse {raw!r} as {kind.__name__}") from None
    try:
        tc = TrainConfig(**{k: values[k] for k in TRAIN_KEYS})
        ModelConfig(1, 1, **{k: values[k] for k in MODEL_KEYS})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return tc, {k: values[k] for k in MODEL_KEYS}


def echo_config(tc: TrainConfig, dims: dict) -> str:
    lines = [f"{k}={getattr(tc, k)!r}" for k in TRAIN_KEYS] + [f"{k}={dims[k]!r}" for k in MODEL_KEYS]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _split_path(data: str, split: str) -> Path:
    path = Path(data)
    if path.is_dir():
        path = path / f"{split}.txt"
    if not path.exists():
        raise DataError(f"no such corpus file: {path}")
    return path


def _load(data: str, split: str):
    return load_corpus(_split_path(data, split))


def _checkpoint(path: str):
    ck = load_checkpoint(path)
    if ck.vocabs is None:
        raise DataError(f"{path}: checkpoint carries no vocabularies")
    return ck


def _max_len(ck, side: str, override: int | None) -> int:
    if override is not None:
        if override < 1:
            raise UsageError("--max-len must be >= 1")
        return override
    return int(ck.meta.get(f"max_len_{side}", 50))


def _seed(args, ck) -> int:
    if args.seed is not None:
        return args.seed
    return int(ck.meta.get("seed", 0))


def _write_lines(lines: Sequence[str], out: str | None) -> None:
    text = "".join(line + "\n" for line in lines)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    pairs = parse_config_text(Path(args.config).read_text(encoding="utf-8"), args.config) if args.config else {}
    for item in args.set or []:
        pairs.update(parse_config_text(item, "--set"))
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if "seed" not in pairs:
        raise UsageError("train needs --seed or a seed= line in the config")
    tc, dims = resolve_config(pairs)

    train_set = _load(args.data, "train")
    valid_path = Path(args.data) / "valid.txt"
    valid = load_corpus(valid_path) if Path(args.data).is_dir() and valid_path.exists() else None
    vocabs = (build_vocab((e.x for e in train_set), tc.vocab_cap), build_vocab((e.y for e in train_set), tc.vocab_cap))
    mc = ModelConfig(len(vocabs[0]), len(vocabs[1]), **dims)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(echo_config(tc, dims), encoding="utf-8")
    (out / "seed").write_text(f"{tc.seed}\n", encoding="utf-8")
    meta = {
        "max_len_x": str(default_max_len(train_set, "x")),
        "max_len_y": str(default_max_len(train_set, "y")),
    }
    log.info("training on %d sentences (vocab %d/%d)", len(train_set), len(vocabs[0]), len(vocabs[1]))
    res = train(train_set, vocabs, tc, model_config=mc, valid=valid, out_dir=out, meta=meta)
    last = res.history[-1]
    print(f"epochs={len(res.history)} recon_x={last.recon_x!r} best_epoch={res.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = _checkpoint(args.ckpt)
    exs = _load(args.data, args.split)
    rep = eval_nll_ppl(ck.params, exs, ck.vocabs)
    print(rep.line())
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    ck = _checkpoint(args.ckpt)
    exs = load_corpus(args.input)
    try:
        decode = parse_decode_mode(args.decode_mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rng = np.random.default_rng(_seed(args, ck))
    outs = reconstruct(
        ck.params, exs, ck.vocabs, z_mode=args.z_mode, s_mode=args.s_mode, s_source=args.s_source,
        decode=decode, max_len=_max_len(ck, "x", args.max_len), rng=rng, n_samples=args.n,
    )
    _write_lines([" ".join(o) for per in outs for o in per], args.out)
    return EXIT_OK


def cmd_infer_syntax(args) -> int:
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    ck = _checkpoint(args.ckpt)
    exs = load_corpus(args.input)
    ranked = infer_syntax(ck.params, exs, ck.vocabs, beam_width=args.beam, max_len=_max_len(ck, "y", args.max_len), source=args.source)
    lines = []
    for i, hyps in enumerate(ranked):
        if i:
            lines.append("")
        lines += [f"{lp!r}\t{' '.join(tags)}" for tags, lp in hyps]
    _write_lines(lines, args.out)
    return EXIT_OK


def cmd_modify_syntax(args) -> int:
    if args.target_tag not in VERB_TAGS:
        raise UsageError(f"--target-tag must be one of {', '.join(VERB_TAGS)}")
    ck = _checkpoint(args.ckpt)
    exs = load_corpus(args.input)
    max_len = _max_len(ck, "x", args.max_len)
    edited = [type(e)(e.x, modify_verbs(e.y, args.target_tag)) for e in exs]
    outs = reconstruct(ck.params, edited, ck.vocabs, s_source="from_y", max_len=max_len)
    _write_lines([" ".join(o[0]) for o in outs], args.out)
    if args.tagger:
        tagger = PerceptronTagger.load(args.tagger)
        rep = verb_modification_probe(ck.params, exs, ck.vocabs, tagger, targets=(args.target_tag,), max_len=max_len)
        for line in rep.lines():
            print(line, file=sys.stderr)
        print(f"selected={rep.n_selected} filtered={rep.n_filtered}", file=sys.stderr)
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n < 1:
        raise UsageError("-n must be >= 1")
    ck = _checkpoint(args.ckpt)
    try:
        decode = parse_decode_mode(args.decode_mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rng = np.random.default_rng(_seed(args, ck))
    outs = sample_prior(ck.params, ck.vocabs[0], args.n, rng, decode=decode, max_len=_max_len(ck, "x", args.max_len))
    _write_lines([" ".join(o) for o in outs], args.out)
    return EXIT_OK


def cmd_export_latents(args) -> int:
    ck = _checkpoint(args.ckpt)
    exs = _load(args.data, args.split)
    n = export_latents(ck.params, exs, ck.vocabs, args.out)
    log.info("wrote %d rows to %s", n, args.out)
    return EXIT_OK


def cmd_tagger_train(args) -> int:
    exs = _load(args.data, "train")
    tagger = train_tagger(exs, n_iter=args.iters, seed=args.seed or 0)
    tagger.save(args.out)
    acc = tagger.accuracy([(e.x, e.y) for e in exs])
    print(f"sentences={len(exs)} train_accuracy={acc:.6f}")
    return EXIT_OK


def cmd_toy_corpus(args) -> int:
    from .toy import toy_corpus

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    used: set = set()
    for split, n, offset in (("train", args.n, 0), ("valid", args.n_valid, 1), ("test", args.n_valid, 2)):
        if n <= 0:
            continue
        exs = toy_corpus(n, seed=args.seed + offset, exclude=used)
        used.update(exs)
        write_corpus(out / f"{split}.txt", exs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="savae", description="Syntax-aware VAE: training, evaluation and controlled generation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--config", help="key=value config file")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    sp.add_argument("--data", required=True, help="directory holding train.txt (and optionally valid.txt)")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--seed", type=int)

    sp = add("eval", cmd_eval, "reconstruction NLL / perplexity")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True, help="corpus file or directory")
    sp.add_argument("--split", default="test", help="split name when --data is a directory")

    sp = add("reconstruct", cmd_reconstruct, "encode and decode sentences")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--z-mode", choices=("mean", "sample"), default="mean")
    sp.add_argument("--s-mode", choices=("mean", "sample"), default="mean")
    sp.add_argument("--s-source", choices=("from_x", "from_y"), default="from_x")
    sp.add_argument("--decode-mode", default="greedy", help="greedy | beam[:W] | sample[:T]")
    sp.add_argument("-n", type=int, default=1, help="outputs per input")
    sp.add_argument("--max-len", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = add("infer-syntax", cmd_infer_syntax, "beam-decode syntax from the syntactic latent")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--beam", type=int, default=10)
    sp.add_argument("--source", choices=("x", "y"), default="x", help="infer s from text (x) or syntax (y)")
    sp.add_argument("--max-len", type=int)
    sp.add_argument("--out")

    sp = add("modify-syntax", cmd_modify_syntax, "rewrite verb tags and regenerate")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--target-tag", required=True)
    sp.add_argument("--tagger", help="tagger file; prints a probe report to stderr")
    sp.add_argument("--max-len", type=int)
    sp.add_argument("--out")

    sp = add("sample", cmd_sample, "decode from prior samples")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("-n", type=int, default=10)
    sp.add_argument("--decode-mode", default="greedy")
    sp.add_argument("--max-len", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = add("export-latents", cmd_export_latents, "write posterior means of s as CSV")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)

    sp = add("tagger-train", cmd_tagger_train, "train the POS tagger used by the probes")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iters", type=int, default=5)
    sp.add_argument("--seed", type=int)

    sp = add("toy-corpus", cmd_toy_corpus, "write the synthetic verb-morphology corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("-n", type=int, default=200)
    sp.add_argument("--n-valid", type=int, default=50)
    sp.add_argument("--seed", type=int, required=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteGradient, ad.NumericRangeError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorpusError, CheckpointError, ad.ContractError, ad.DimensionError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        ad.reset_graph()


if __name__ == "__main__":
    sys.exit(main())
