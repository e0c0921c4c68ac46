"""Parallel text/syntax corpora: loading, vocabularies and padded batches.

Corpus files are UTF-8 with one record per line::

    the dog ran<TAB>DT NN VBD

Tokens are separated by single spaces; the text side and the syntax side are
separated by one tab.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
DEFAULT_CAP = 20_000
BUCKET_WIDTH = 8


class CorpusError(ValueError):
    """Malformed corpus record; carries the 1-based line number."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}:"
        if line is not None:
            loc += f"{line}: "
        elif loc:
            loc += " "
        super().__init__(loc + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class ParallelExample:
    x: tuple[str, ...]
    y: tuple[str, ...]

    def __post_init__(self):
        if not self.x or not self.y:
            raise ValueError("text and syntax sequences must be non-empty")


@dataclass
class Vocab:
    """Token/id bijection with four reserved ids (pad, bos, eos, unk)."""

    itos: list[str]
    cap: int = DEFAULT_CAP
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, BOS):
                continue
            if strip and i == EOS:
                break
            out.append(self.itos[i])
        return out


def _parse_record(line: str, path: str | None, lineno: int) -> ParallelExample:
    if "\t" not in line:
        raise CorpusError("expected '<text tokens>\\t<syntax tokens>'", path, lineno)
    text, _, syntax = line.partition("\t")
    if "\t" in syntax:
        raise CorpusError("more than one tab in record", path, lineno)
    x = text.split(" ")
    y = syntax.split(" ")
    if any(t == "" for t in x) or any(t == "" for t in y):
        if not text.strip() or not syntax.strip():
            raise CorpusError("empty text or syntax side", path, lineno)
        raise CorpusError("empty token (doubled or trailing space)", path, lineno)
    if len(x) != len(y):
        raise CorpusError(f"{len(x)} tokens but {len(y)} tags", path, lineno)
    return ParallelExample(tuple(x), tuple(y))


def parse_lines(lines: Iterable[str], path: str | None = None) -> list[ParallelExample]:
    examples = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            raise CorpusError("empty record", path, lineno)
        examples.append(_parse_record(line, path, lineno))
    return examples


def load_corpus(path) -> list[ParallelExample]:
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            return parse_lines(fh, str(path))
    except UnicodeDecodeError as exc:
        raise CorpusError(f"not valid UTF-8 ({exc.reason})", str(path)) from exc


def write_corpus(path, examples: Sequence[ParallelExample]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(" ".join(ex.x) + "\t" + " ".join(ex.y) + "\n")


def build_vocab(sequences: Iterable[Sequence[str]], cap: int = DEFAULT_CAP) -> Vocab:
    """Most frequent tokens first, ties broken lexicographically; ``cap`` counts reserved ids."""
    if cap <= len(RESERVED):
        raise ValueError(f"vocabulary cap must exceed {len(RESERVED)}")
    counts = Counter(t for seq in sequences for t in seq)
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, _ in ranked[: cap - len(RESERVED)]]
    return Vocab(list(RESERVED) + keep, cap=cap)


def build_vocabs(examples: Sequence[ParallelExample], cap: int = DEFAULT_CAP) -> tuple[Vocab, Vocab]:
    return build_vocab((e.x for e in examples), cap), build_vocab((e.y for e in examples), cap)


@dataclass
class SeqBatch:
    """One side (text or syntax) of a batch.

    ``ids`` is the raw sequence for the encoders, ``dec_in`` is BOS-prefixed and
    ``dec_out`` EOS-suffixed for teacher forcing. ``mask`` marks real
    positions of ``ids``; ``dec_mask`` those of ``dec_out``.
    """

    ids: np.ndarray
    lengths: np.ndarray
    dec_in: np.ndarray
    dec_out: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return (np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]).astype(np.float32)

    @property
    def dec_mask(self) -> np.ndarray:
        return (np.arange(self.dec_out.shape[1])[None, :] <= self.lengths[:, None]).astype(np.float32)

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def pad_sequences(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> SeqBatch:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.size and lengths.min() < 1:
        raise ValueError("sequences must be non-empty")
    T = int(lengths.max()) if max_len is None else max_len
    if T < lengths.max():
        raise ValueError(f"max_len {T} shorter than longest sequence {lengths.max()}")
    B = len(seqs)
    ids = np.full((B, T), PAD, dtype=np.int64)
    dec_in = np.full((B, T + 1), PAD, dtype=np.int64)
    dec_out = np.full((B, T + 1), PAD, dtype=np.int64)
    for b, s in enumerate(seqs):
        n = len(s)
        ids[b, :n] = s
        dec_in[b, 0] = BOS
        dec_in[b, 1 : n + 1] = s
        dec_out[b, :n] = s
        dec_out[b, n] = EOS
    return SeqBatch(ids, lengths, dec_in, dec_out)


@dataclass
class Batch:
    x: SeqBatch
    y: SeqBatch | None
    index: np.ndarray  # positions of the examples in the source list

    @property
    def size(self) -> int:
        return self.x.size


def numericalize(
    examples: Sequence[ParallelExample],
    text_vocab: Vocab,
    syntax_vocab: Vocab | None,
    index: Sequence[int] | None = None,
    pad_to: tuple[int | None, int | None] = (None, None),
) -> Batch:
    xs = [text_vocab.encode(e.x) for e in examples]
    x = pad_sequences(xs, pad_to[0])
    y = None
    if syntax_vocab is not None:
        y = pad_sequences([syntax_vocab.encode(e.y) for e in examples], pad_to[1])
    idx = np.arange(len(examples)) if index is None else np.asarray(index, dtype=np.int64)
    return Batch(x, y, idx)


def batch_order(
    n_examples: int, lengths: Sequence[int], batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Shuffle, bucket by length (width ``BUCKET_WIDTH``), cut into batches, shuffle batches."""
    perm = rng.permutation(n_examples)
    buckets: dict[int, list[int]] = {}
    for i in perm:
        buckets.setdefault((lengths[i] - 1) // BUCKET_WIDTH, []).append(int(i))
    chunks = []
    for key in sorted(buckets):
        members = buckets[key]
        for start in range(0, len(members), batch_size):
            chunks.append(np.array(members[start : start + batch_size], dtype=np.int64))
    order = rng.permutation(len(chunks))
    return [chunks[k] for k in order]


def make_batches(
    examples: Sequence[ParallelExample],
    vocabs: tuple[Vocab, Vocab],
    batch_size: int,
    seed: int | np.random.Generator,
    bucket: bool = True,
) -> Iterator[Batch]:
    """Yield one epoch of padded batches in a seed-determined order.

    With ``bucket=False`` examples are only shuffled, not grouped by length.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if bucket:
        chunks = batch_order(len(examples), [len(e.x) for e in examples], batch_size, rng)
    else:
        perm = rng.permutation(len(examples))
        chunks = [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
    text_vocab, syntax_vocab = vocabs
    for idx in chunks:
        yield numericalize([examples[i] for i in idx], text_vocab, syntax_vocab, idx)


def length_quantile(examples: Sequence[ParallelExample], q: float = 0.95, side: str = "x") -> int:
    lens = [len(getattr(e, side)) for e in examples]
    return int(np.ceil(np.quantile(lens, q))) if lens else 1
