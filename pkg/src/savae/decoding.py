"""Generation from latents: greedy, ancestral sampling and beam search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .corpus import BOS, EOS, PAD, ParallelExample, Vocab, length_quantile, numericalize
from .model import (
    GaussianParams,
    SavaeParams,
    decoder_step,
    encode_s_from_x,
    encode_s_from_y,
    encode_z,
    init_state,
)
from .layers import LstmState

NEG_INF = -np.inf


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool = False

    def __len__(self) -> int:
        return len(self.tokens)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class StepModel:
    """Stateless wrapper that scores next tokens for a batch of prefixes."""

    def __init__(self, params: SavaeParams, target: str, z: Tensor | None, s: Tensor | None):
        if target not in ("text", "syntax"):
            raise ContractError(f"decoder must be 'text' or 'syntax', got {target!r}")
        if target == "text":
            if z is None:
                raise ContractError("text decoding needs z")
            self.dec = params.dec_x
            init = z
            self.feed = s.data if s is not None else None
            if params.config.has_syntax and s is None:
                raise ContractError("text decoding needs s")
        else:
            if s is None:
                raise ContractError("syntax decoding needs s")
            if params.dec_y is None:
                raise ContractError("model has no syntax decoder")
            self.dec = params.dec_y
            init = s
            self.feed = None
        with ad.no_grad():
            self.fused = self.dec.lstm.fused()
            self.state0 = init_state(self.dec, Tensor(np.atleast_2d(init.data[:1] if init.data.ndim == 2 else init.data)))

    def __call__(self, state: LstmState, tokens: np.ndarray) -> tuple[LstmState, np.ndarray]:
        n = tokens.shape[0]
        feed = None if self.feed is None else Tensor(np.repeat(self.feed[:1], n, axis=0))
        with ad.no_grad():
            state, logits = decoder_step(self.dec, self.fused, state, tokens, feed)
        logp = _log_softmax(logits.data)
        logp[:, PAD] = NEG_INF
        logp[:, BOS] = NEG_INF
        return state, logp


def _take(state: LstmState, rows: np.ndarray) -> LstmState:
    return LstmState(Tensor(state.h.data[rows]), Tensor(state.c.data[rows]))


def _greedy(step: StepModel, max_len: int) -> Hypothesis:
    state, tok = step.state0, np.array([BOS])
    out: list[int] = []
    score = 0.0
    for _ in range(max_len):
        state, logp = step(state, tok)
        v = int(np.argmax(logp[0]))
        score += float(logp[0, v])
        if v == EOS:
            return Hypothesis(tuple(out), score, True)
        out.append(v)
        tok = np.array([v])
    return Hypothesis(tuple(out), score, False)


def _sample(step: StepModel, max_len: int, temperature: float, rng: np.random.Generator) -> Hypothesis:
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    state, tok = step.state0, np.array([BOS])
    out: list[int] = []
    score = 0.0
    for _ in range(max_len):
        state, logp = step(state, tok)
        scaled = logp[0] / temperature
        scaled -= scaled[np.isfinite(scaled)].max()
        p = np.exp(scaled)
        p /= p.sum()
        v = int(rng.choice(p.shape[0], p=p))
        score += float(logp[0, v])
        if v == EOS:
            return Hypothesis(tuple(out), score, True)
        out.append(v)
        tok = np.array([v])
    return Hypothesis(tuple(out), score, False)


def _rank_key(h: Hypothesis):
    return (-h.logprob, h.tokens)


def _beam(step: StepModel, max_len: int, width: int) -> list[Hypothesis]:
    """Beam search without length normalisation.

    Each step keeps the ``width`` best extensions of the live prefixes (exact
    score ties go to the lexicographically smaller token sequence). Extensions
    ending in EOS are moved to the finished pool. Search stops early once
    ``width`` finished hypotheses all beat the best live prefix, since scores
    never increase.
    """
    state = step.state0
    scores = np.zeros(1)
    prefixes: list[tuple[int, ...]] = [()]
    last = np.array([BOS])
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        state, logp = step(state, last)
        total = scores[:, None] + logp
        flat = total.ravel()
        n_live = np.isfinite(flat).sum()
        k = min(width, n_live)
        if k == 0:
            break
        # everything tied with the k-th best score is a candidate for tie-breaking
        kth = np.partition(flat, flat.size - k)[flat.size - k]
        cand = np.flatnonzero(flat >= kth)
        V = logp.shape[1]
        ranked = sorted(cand, key=lambda c: (-flat[c], prefixes[c // V] + (c % V,)))[:k]
        keep_rows, keep_tok, new_prefixes, new_scores = [], [], [], []
        for c in ranked:
            row, v = divmod(int(c), V)
            sc = float(flat[c])
            if v == EOS:
                finished.append(Hypothesis(prefixes[row], sc, True))
            else:
                keep_rows.append(row)
                keep_tok.append(v)
                new_prefixes.append(prefixes[row] + (v,))
                new_scores.append(sc)
        if not keep_rows:
            prefixes = []
            break
        rows = np.array(keep_rows)
        state = _take(state, rows)
        last = np.array(keep_tok)
        prefixes = new_prefixes
        scores = np.array(new_scores)
        if len(finished) >= width:
            finished.sort(key=_rank_key)
            if finished[width - 1].logprob >= scores.max():
                prefixes = []
                break
    pool = finished + [Hypothesis(p, float(s), False) for p, s in zip(prefixes, scores)]
    pool.sort(key=_rank_key)
    return pool[:width]


def generate(
    params: SavaeParams,
    target: str,
    z: Tensor | None,
    s: Tensor | None,
    mode: str = "greedy",
    max_len: int = 50,
    width: int = 10,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
) -> list[Hypothesis]:
    """Decode one sequence (or a beam of them) from a single latent row.

    ``target`` selects the text decoder (needs ``z`` and, with a syntax
    channel, ``s``) or the syntax decoder (needs ``s``). Modes are
    ``greedy``, ``sample`` and ``beam``.
    """
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    step = StepModel(params, target, z, s)
    if mode == "greedy":
        return [_greedy(step, max_len)]
    if mode == "sample":
        if rng is None:
            raise ContractError("sampling needs an rng")
        return [_sample(step, max_len, temperature, rng)]
    if mode == "beam":
        if width < 1:
            raise ContractError("beam width must be >= 1")
        return _beam(step, max_len, width)
    raise ContractError(f"unknown decode mode {mode!r}")


def parse_decode_mode(spec: str) -> dict:
    """``greedy`` | ``beam`` | ``beam:W`` | ``sample`` | ``sample:T``."""
    name, _, arg = spec.partition(":")
    if name == "greedy" and not arg:
        return {"mode": "greedy"}
    if name == "beam":
        return {"mode": "beam", "width": int(arg) if arg else 10}
    if name == "sample":
        return {"mode": "sample", "temperature": float(arg) if arg else 1.0}
    raise ValueError(f"bad decode mode {spec!r}")


# ---------------------------------------------------------------------------
# encoder + decoder workflows
# ---------------------------------------------------------------------------


def default_max_len(examples: Sequence[ParallelExample], side: str = "x") -> int:
    """Twice the 95th-percentile training length."""
    return max(1, 2 * length_quantile(examples, 0.95, side))


def posteriors(params: SavaeParams, examples: Sequence[ParallelExample], vocabs, need_y: bool = False):
    """Posterior parameters for a list of examples: (z, s|x, s|y or None)."""
    text_vocab, syntax_vocab = vocabs
    batch = numericalize(examples, text_vocab, syntax_vocab if need_y else None)
    with ad.no_grad():
        pz = encode_z(params, batch.x)
        psx = encode_s_from_x(params, batch.x) if params.config.has_syntax else None
        psy = encode_s_from_y(params, batch.y) if need_y else None
    return pz, psx, psy


def _row(post: GaussianParams, i: int, mode: str, rng) -> Tensor:
    mu = post.mean.data[i : i + 1]
    if mode == "mean":
        return Tensor(mu)
    if mode == "sample":
        if rng is None:
            raise ContractError("sampling a latent needs an rng")
        std = np.exp(0.5 * post.log_var.data[i : i + 1])
        return Tensor(mu + std * rng.standard_normal(mu.shape))
    raise ContractError(f"latent mode must be 'mean' or 'sample', got {mode!r}")


def reconstruct(
    params: SavaeParams,
    examples: Sequence[ParallelExample],
    vocabs: tuple[Vocab, Vocab],
    z_mode: str = "mean",
    s_mode: str = "mean",
    s_source: str = "from_x",
    decode: str | dict = "greedy",
    max_len: int = 50,
    rng: np.random.Generator | None = None,
    n_samples: int = 1,
) -> list[list[list[str]]]:
    """Encode each example and decode text; returns ``n_samples`` token lists per example.

    ``s_source='from_y'`` infers s from each example's syntax sequence, which
    may have been edited (syntax control).
    """
    if s_source not in ("from_x", "from_y"):
        raise ContractError(f"s_source must be 'from_x' or 'from_y', got {s_source!r}")
    dec_kw = parse_decode_mode(decode) if isinstance(decode, str) else dict(decode)
    need_y = s_source == "from_y" and params.config.has_syntax
    pz, psx, psy = posteriors(params, examples, vocabs, need_y)
    post_s = psy if need_y else psx
    text_vocab = vocabs[0]
    out = []
    for i in range(len(examples)):
        outs = []
        for _ in range(n_samples):
            z = _row(pz, i, z_mode, rng)
            s = _row(post_s, i, s_mode, rng) if post_s is not None else None
            hyp = generate(params, "text", z, s, max_len=max_len, rng=rng, **dec_kw)[0]
            outs.append(text_vocab.decode(hyp.tokens))
        out.append(outs)
    return out


def infer_syntax(
    params: SavaeParams,
    examples: Sequence[ParallelExample],
    vocabs: tuple[Vocab, Vocab],
    beam_width: int = 10,
    max_len: int = 50,
    source: str = "x",
) -> list[list[tuple[list[str], float]]]:
    """Beam-decode syntax from the posterior mean of s (inferred from text by default).

    Returns, per example, up to ``beam_width`` ``(tags, logprob)`` pairs, best first.
    """
    if source not in ("x", "y"):
        raise ContractError("source must be 'x' or 'y'")
    pz, psx, psy = posteriors(params, examples, vocabs, need_y=source == "y")
    post = psx if source == "x" else psy
    syntax_vocab = vocabs[1]
    results = []
    for i in range(len(examples)):
        s = _row(post, i, "mean", None)
        hyps = generate(params, "syntax", None, s, mode="beam", width=beam_width, max_len=max_len)
        results.append([(syntax_vocab.decode(h.tokens), h.logprob) for h in hyps])
    return results


def sample_prior(
    params: SavaeParams,
    vocab: Vocab,
    n: int,
    rng: np.random.Generator,
    decode: str | dict = "greedy",
    max_len: int = 50,
) -> list[list[str]]:
    """Decode text from z, s drawn from the standard-normal priors."""
    dec_kw = parse_decode_mode(decode) if isinstance(decode, str) else dict(decode)
    c = params.config
    out = []
    for _ in range(n):
        z = Tensor(rng.standard_normal((1, c.d_z)))
        s = Tensor(rng.standard_normal((1, c.d_s))) if c.has_syntax else None
        hyp = generate(params, "text", z, s, max_len=max_len, rng=rng, **dec_kw)[0]
        out.append(vocab.decode(hyp.tokens))
    return out
