"""Optimisation loop, Adam, KL annealing and the binary checkpoint format."""

from __future__ import annotations

import ast
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .corpus import ParallelExample, Vocab, batch_order, make_batches
from .model import ModelConfig, SavaeParams, loss_supervised

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite; the last good checkpoint is kept."""


class NonFiniteGradient(ArithmeticError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; step aborted")
        self.name = name


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 24
    alpha: float = 0.5
    kl_anneal_steps: int = 0  # 0 means "the steps of the first 4 epochs"
    dropout: float = 0.2
    seed: int = 0
    grad_clip: float = 5.0  # global norm; 0 disables
    n_kl_samples: int = 1
    eval_kl_samples: int = 128
    vocab_cap: int = 20_000

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("lr", "batch_size", "max_epochs", "n_kl_samples", "eval_kl_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kl_anneal_steps < 0 or self.grad_clip < 0 or self.seed < 0:
            raise ValueError("kl_anneal_steps, grad_clip and seed must be non-negative")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr: float = 1e-3, **kw) -> "AdamState":
        named = _named(params)
        return cls(
            {k: np.zeros_like(p.data) for k, p in named.items()},
            {k: np.zeros_like(p.data) for k, p in named.items()},
            lr=lr,
            **kw,
        )


def _named(params) -> dict[str, ad.Tensor]:
    if isinstance(params, SavaeParams):
        return params.named_tensors()
    if isinstance(params, dict):
        return params
    return {p.name or str(i): p for i, p in enumerate(params)}


def adam_step(state: AdamState, params) -> None:
    """Bias-corrected Adam update in place; gradients are cleared afterwards.

    Parameters whose ``grad`` is ``None`` did not take part in the loss and are
    left untouched (their moments do not decay either).
    """
    named = _named(params)
    for name, p in named.items():
        if p.grad is not None and not math.isfinite(kernels.sum_squares(p.grad)):
            raise NonFiniteGradient(name)
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    step = state.lr / (1.0 - b1**t)
    bc2 = 1.0 - b2**t
    for name, p in named.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        kernels.adam_update(p.data, np.ascontiguousarray(g, dtype=np.float32), m, v, step, b1, b2, bc2, state.eps)
        p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in _named(params).values() if p.grad is not None]
    total = math.sqrt(sum(kernels.sum_squares(g) for g in grads))
    if max_norm > 0 and total > max_norm:
        c = np.float32(max_norm / (total + 1e-6))
        for g in grads:
            g *= c
    return total


def kl_anneal_weight(step: int, anneal_steps: int) -> float:
    """Linear ramp from 0 at step 0 to 1 at ``anneal_steps`` and after."""
    if anneal_steps < 1:
        raise ValueError("anneal_steps must be >= 1")
    return min(step / anneal_steps, 1.0)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

METRICS_HEADER = "#epoch\trecon_x\trecon_y\tkl_z\tkl_s\tkl_weight\tval_nll"


@dataclass
class EpochMetrics:
    epoch: int
    recon_x: float
    recon_y: float
    kl_z: float
    kl_s: float
    kl_weight: float
    val_nll: float = float("nan")
    loss: float = 0.0
    recon_x_per_token: float = 0.0
    switch_x_fraction: float = 0.0
    n_examples: int = 0

    def line(self) -> str:
        vals = (self.recon_x, self.recon_y, self.kl_z, self.kl_s, self.kl_weight, self.val_nll)
        return "\t".join([str(self.epoch)] + [repr(float(v)) for v in vals])


@dataclass
class TrainResult:
    params: SavaeParams
    history: list[EpochMetrics] = field(default_factory=list)
    optimizer: AdamState | None = None
    best_epoch: int = 0


def steps_per_epoch(examples: Sequence[ParallelExample], batch_size: int) -> int:
    lengths = [len(e.x) for e in examples]
    # bucket sizes are fixed, so the batch count does not depend on the shuffle
    return len(batch_order(len(examples), lengths, batch_size, np.random.default_rng(0)))


def train(
    examples: Sequence[ParallelExample],
    vocabs: tuple[Vocab, Vocab],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    valid: Sequence[ParallelExample] | None = None,
    out_dir=None,
    params: SavaeParams | None = None,
    on_epoch: Callable[[EpochMetrics, SavaeParams], None] | None = None,
    meta: dict[str, str] | None = None,
) -> TrainResult:
    """Train with the supervised objective, one Adam step per mini-batch.

    When ``out_dir`` is given, ``metrics.tsv``, ``last.ckpt`` (every epoch) and
    ``best.ckpt`` (lowest validation NLL, or training NLL without a validation
    split) are written there. ``meta`` entries are stored in both checkpoints.
    """
    from .evaluation import eval_nll_ppl

    if not examples:
        raise ValueError("training corpus is empty")
    text_vocab, syntax_vocab = vocabs
    mc = model_config or ModelConfig(len(text_vocab), len(syntax_vocab))
    init_ss, shuffle_ss, noise_ss = np.random.SeedSequence(config.seed).spawn(3)
    if params is None:
        params = SavaeParams.init(mc, np.random.default_rng(init_ss))
    opt = AdamState.for_params(params, lr=config.lr)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    anneal = config.kl_anneal_steps or 4 * steps_per_epoch(examples, config.batch_size)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = (out / "metrics.tsv").open("w", encoding="utf-8")
        metrics_fh.write(METRICS_HEADER + "\n")

    result = TrainResult(params, optimizer=opt)
    best = math.inf
    step = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            sums = dict(loss=0.0, recon_x=0.0, recon_y=0.0, kl_z=0.0, kl_s=0.0)
            n = tokens = switched = 0
            weight = 0.0
            for batch in make_batches(examples, vocabs, config.batch_size, shuffle_rng):
                weight = kl_anneal_weight(step, anneal)
                try:
                    loss, rep = loss_supervised(
                        params,
                        batch,
                        alpha=config.alpha,
                        kl_weight=weight,
                        n_kl_samples=config.n_kl_samples,
                        rng=noise_rng,
                        dropout=config.dropout,
                    )
                    if not np.isfinite(loss.data):
                        raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
                    ad.backward(loss)
                    if config.grad_clip > 0:
                        clip_grad_norm(params, config.grad_clip)
                    adam_step(opt, params)
                except (ad.NumericRangeError, NonFiniteGradient) as exc:
                    raise TrainingDiverged(f"epoch {epoch}, step {step}: {exc}") from exc
                finally:
                    ad.reset_graph()
                step += 1
                b = rep.batch_size
                for k in sums:
                    sums[k] += getattr(rep, k) * b
                n += b
                tokens += rep.tokens_x
                switched += rep.switch_x
            m = EpochMetrics(
                epoch=epoch,
                recon_x=sums["recon_x"] / n,
                recon_y=sums["recon_y"] / n,
                kl_z=sums["kl_z"] / n,
                kl_s=sums["kl_s"] / n,
                kl_weight=weight,
                loss=sums["loss"] / n,
                recon_x_per_token=sums["recon_x"] / tokens,
                switch_x_fraction=switched / n,
                n_examples=n,
            )
            if valid:
                m.val_nll = eval_nll_ppl(params, valid, vocabs).nll
            score = m.val_nll if valid else m.recon_x
            result.history.append(m)
            log.info(
                "epoch %d loss %.4f recon_x %.4f recon_y %.4f kl_z %.4f kl_s %.4f w %.3f val %.4f",
                epoch, m.loss, m.recon_x, m.recon_y, m.kl_z, m.kl_s, m.kl_weight, m.val_nll,
            )
            if metrics_fh is not None:
                metrics_fh.write(m.line() + "\n")
                metrics_fh.flush()
                ck_meta = dict(meta or {}) | {"epoch": str(epoch)} | config_items(config)
                save_checkpoint(params, out / "last.ckpt", vocabs, ck_meta, opt)
                if score < best:
                    save_checkpoint(params, out / "best.ckpt", vocabs, ck_meta, opt)
            if score < best:
                best = score
                result.best_epoch = epoch
            if on_epoch is not None:
                on_epoch(m, params)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return result


def config_items(config) -> dict[str, str]:
    return {f.name: repr(getattr(config, f.name)) for f in fields(config)}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"SAVAECKP"
VERSION = 1


@dataclass
class Checkpoint:
    params: SavaeParams
    vocabs: tuple[Vocab, Vocab] | None
    meta: dict[str, str]
    optimizer: AdamState | None = None


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _pack_array(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_checkpoint(
    params: SavaeParams,
    path,
    vocabs: tuple[Vocab, Vocab] | None = None,
    meta: dict[str, str] | None = None,
    optimizer: AdamState | None = None,
) -> None:
    """Write a versioned little-endian checkpoint with a trailing CRC-32.

    Layout: magic, u32 version, model config text, meta text, text vocab,
    syntax vocab, u32 tensor count, tensors (name, u8 ndim, u32 dims, f32
    payload), u8 optimizer flag [+ u64 step, 4 x f64 hyper-parameters, m and v
    payloads in tensor order], u32 CRC-32 of everything before it.
    """
    named = params.named_tensors()
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(_pack_str("\n".join(f"{k}={v}" for k, v in params.config.to_dict().items())))
    parts.append(_pack_str("\n".join(f"{k}={v}" for k, v in (meta or {}).items())))
    for vocab in vocabs or (None, None):
        parts.append(_pack_str("" if vocab is None else "\n".join(vocab.itos)))
    parts.append(struct.pack("<I", len(named)))
    for name, t in named.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<B", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(_pack_array(t.data))
    if optimizer is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        o = optimizer
        parts.append(struct.pack("<Q4d", o.t, o.lr, o.beta1, o.beta2, o.eps))
        for name, t in named.items():
            parts.append(_pack_array(o.m.get(name, np.zeros_like(t.data))))
            parts.append(_pack_array(o.v.get(name, np.zeros_like(t.data))))
    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.split("\n"):
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by ``save_checkpoint``; nothing is returned on any error."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a SAVAE checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    try:
        cfg = {k: int(v) for k, v in _parse_kv(r.string()).items()}
        config = ModelConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config: {exc}") from exc
    meta = _parse_kv(r.string())
    vocab_texts = [r.string(), r.string()]
    vocabs = None
    if all(vocab_texts):
        vocabs = tuple(Vocab(t.split("\n")) for t in vocab_texts)

    params = SavaeParams.init(config, 0)
    expected = params.named_tensors()
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    order = []
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if name not in expected:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        if tuple(shape) != expected[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {shape}, model expects {expected[name].shape}")
        arrays[name] = r.array(shape)
        order.append(name)
    missing = set(expected) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    (has_opt,) = r.unpack("<B")
    optimizer = None
    if has_opt:
        t, lr, b1, b2, eps = r.unpack("<Q4d")
        m, v = {}, {}
        for name in order:
            m[name] = r.array(expected[name].shape)
            v[name] = r.array(expected[name].shape)
        optimizer = AdamState(m, v, t=t, lr=lr, beta1=b1, beta2=b2, eps=eps)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    for name, t in expected.items():
        t.data = arrays[name].copy()
    return Checkpoint(params, vocabs, meta, optimizer)


def train_config_from_meta(meta: dict[str, str]) -> TrainConfig:
    """Rebuild the training config stored in a checkpoint's metadata."""
    defaults = TrainConfig()
    kw = {}
    for f in fields(TrainConfig):
        if f.name in meta:
            kw[f.name] = type(getattr(defaults, f.name))(ast.literal_eval(meta[f.name]))
    return TrainConfig(**kw)
