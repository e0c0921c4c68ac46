"""Syntax-aware VAE: three LSTM encoders, two LSTM decoders and the ELBO losses.

Encoders
    ``enc_z``  text -> content latent z
    ``enc_sx`` text -> syntactic latent s
    ``enc_sy`` syntax -> syntactic latent s
Decoders
    ``dec_x``  (z, s) -> text; z initialises the state, s is appended to every input
    ``dec_y``  s -> syntax; s initialises the state

With ``d_s == 0`` the syntax channel disappears and the model is a plain
LSTM-VAE.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .corpus import Batch, SeqBatch
from .layers import EmbeddingTable, Linear, LstmCellParams, LstmState, embed, lstm_sequence, lstm_step

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class ModelConfig:
    text_vocab_size: int
    syntax_vocab_size: int
    text_emb: int = 200
    syntax_emb: int = 50
    enc_z_hidden: int = 512
    enc_sx_hidden: int = 512
    enc_sy_hidden: int = 128
    dec_x_hidden: int = 512
    dec_y_hidden: int = 128
    d_z: int = 32
    d_s: int = 32

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0 or (v == 0 and f.name != "d_s"):
                raise ValueError(f"{f.name} must be positive, got {v}")

    @property
    def has_syntax(self) -> bool:
        return self.d_s > 0

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass
class GaussianParams:
    mean: Tensor
    log_var: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class Encoder:
    embed: EmbeddingTable
    lstm: LstmCellParams
    mu: Linear
    logvar: Linear

    def tensors(self) -> list[Tensor]:
        return self.embed.tensors() + self.lstm.tensors() + self.mu.tensors() + self.logvar.tensors()


@dataclass
class Decoder:
    embed: EmbeddingTable
    lstm: LstmCellParams
    init_h: Linear
    init_c: Linear
    out: Linear

    def tensors(self) -> list[Tensor]:
        return (
            self.embed.tensors()
            + self.lstm.tensors()
            + self.init_h.tensors()
            + self.init_c.tensors()
            + self.out.tensors()
        )


@dataclass
class SavaeParams:
    config: ModelConfig
    enc_z: Encoder
    dec_x: Decoder
    enc_sx: Encoder | None = None
    enc_sy: Encoder | None = None
    dec_y: Decoder | None = None
    _named: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._named = {}
        for part in ("enc_z", "enc_sx", "enc_sy", "dec_x", "dec_y"):
            mod = getattr(self, part)
            if mod is None:
                continue
            for t in mod.tensors():
                if t.name in self._named:
                    raise ValueError(f"duplicate parameter name {t.name}")
                self._named[t.name] = t

    @classmethod
    def init(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> "SavaeParams":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        c = config

        def encoder(name, vocab, emb, hidden, d):
            return Encoder(
                EmbeddingTable.init(rng, vocab, emb, f"{name}.embed"),
                LstmCellParams.init(rng, emb, hidden, f"{name}.lstm"),
                Linear.init(rng, hidden, d, f"{name}.mu"),
                Linear.init(rng, hidden, d, f"{name}.logvar"),
            )

        def decoder(name, vocab, emb, hidden, d_init, d_feed):
            return Decoder(
                EmbeddingTable.init(rng, vocab, emb, f"{name}.embed"),
                LstmCellParams.init(rng, emb + d_feed, hidden, f"{name}.lstm"),
                Linear.init(rng, d_init, hidden, f"{name}.init_h"),
                Linear.init(rng, d_init, hidden, f"{name}.init_c"),
                Linear.init(rng, hidden, vocab, f"{name}.out"),
            )

        enc_z = encoder("enc_z", c.text_vocab_size, c.text_emb, c.enc_z_hidden, c.d_z)
        enc_sx = enc_sy = dec_y = None
        if c.has_syntax:
            enc_sx = encoder("enc_sx", c.text_vocab_size, c.text_emb, c.enc_sx_hidden, c.d_s)
            enc_sy = encoder("enc_sy", c.syntax_vocab_size, c.syntax_emb, c.enc_sy_hidden, c.d_s)
        dec_x = decoder("dec_x", c.text_vocab_size, c.text_emb, c.dec_x_hidden, c.d_z, c.d_s)
        if c.has_syntax:
            dec_y = decoder("dec_y", c.syntax_vocab_size, c.syntax_emb, c.dec_y_hidden, c.d_s, 0)
        return cls(c, enc_z, dec_x, enc_sx, enc_sy, dec_y)

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(self._named)

    def parameters(self) -> list[Tensor]:
        return list(self._named.values())

    def zero_grad(self) -> None:
        for t in self._named.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._named.values())


@dataclass
class LatentSample:
    z: Tensor
    s: Tensor | None
    a: np.ndarray  # per-example switch, 1 = s inferred from text


class Noise:
    """Independent random streams for one forward pass.

    Every consumer gets its own child generator, so skipping one consumer (say
    the syntax encoder) never shifts the draws seen by another.
    """

    STREAMS = (
        "dropout_enc_z",
        "dropout_enc_sx",
        "dropout_enc_sy",
        "eps_z",
        "eps_s",
        "switch",
        "dropout_dec_x",
        "dropout_dec_y",
        "kl",
    )

    def __init__(self, rng: np.random.Generator | int | None):
        if rng is None:
            self._streams = None
            return
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self._streams = dict(zip(self.STREAMS, rng.spawn(len(self.STREAMS))))

    def __getitem__(self, name: str) -> np.random.Generator:
        if self._streams is None:
            raise ContractError(f"random stream {name!r} requested but no rng was given")
        return self._streams[name]

    @property
    def available(self) -> bool:
        return self._streams is not None


def _dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    keep = rng.random(shape) >= p
    return keep.astype(np.float32) / np.float32(1.0 - p)


def _maybe_dropout(x: Tensor, p: float, rng) -> Tensor:
    if p <= 0.0:
        return x
    return ad.dropout(x, _dropout_mask(rng, x.shape, p))


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def run_encoder(enc: Encoder, seq: SeqBatch, dropout: float = 0.0, rng=None) -> GaussianParams:
    """Final LSTM state at each example's true length -> (mean, clamped log-variance)."""
    if seq.lengths.size == 0 or seq.lengths.min() < 1:
        raise ContractError("encoder input sequences must have length >= 1")
    emb = _maybe_dropout(embed(enc.embed, seq.ids), dropout, rng)
    T = int(seq.lengths.max())
    if T < seq.ids.shape[1]:
        emb = ad.slice_(emb, (slice(None), slice(0, T)))
    B = seq.ids.shape[0]
    h_all = lstm_sequence(enc.lstm, emb, LstmState.zeros(B, enc.lstm.hidden_dim), seq.lengths)
    # rows past their length carry their state, so the last step is the final state
    last = ad.slice_(h_all, (slice(None), T - 1))
    mu = enc.mu(last)
    log_var = ad.clamp(enc.logvar(last), LOGVAR_MIN, LOGVAR_MAX)
    return GaussianParams(mu, log_var)


def encode_z(params: SavaeParams, x: SeqBatch, dropout: float = 0.0, rng=None) -> GaussianParams:
    return run_encoder(params.enc_z, x, dropout, rng)


def encode_s_from_x(params: SavaeParams, x: SeqBatch, dropout: float = 0.0, rng=None) -> GaussianParams:
    if params.enc_sx is None:
        raise ContractError("model has no syntactic latent (d_s == 0)")
    return run_encoder(params.enc_sx, x, dropout, rng)


def encode_s_from_y(params: SavaeParams, y: SeqBatch, dropout: float = 0.0, rng=None) -> GaussianParams:
    if params.enc_sy is None:
        raise ContractError("model has no syntactic latent (d_s == 0)")
    return run_encoder(params.enc_sy, y, dropout, rng)


# ---------------------------------------------------------------------------
# latents and KL terms
# ---------------------------------------------------------------------------


def reparameterize(post: GaussianParams, eps: np.ndarray) -> Tensor:
    std = ad.exp(ad.scale(post.log_var, 0.5))
    return ad.add(post.mean, ad.mul(std, Tensor(eps)))


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")


def draw_switch(rng: np.random.Generator, batch: int, alpha: float) -> np.ndarray:
    """Per-example Bernoulli(alpha) draw; 1 selects the text-side posterior."""
    return (rng.random(batch) < alpha).astype(np.float32)


def mix_components(a: np.ndarray, from_x: Tensor, from_y: Tensor) -> Tensor:
    w = np.broadcast_to(a[:, None], from_x.shape).astype(np.float32)
    return ad.add(ad.mul(from_x, Tensor(w)), ad.mul(from_y, Tensor(1.0 - w)))


def sample_latents(
    post_z: GaussianParams,
    post_s_x: GaussianParams | None,
    post_s_y: GaussianParams | None,
    alpha: float,
    rng,
) -> LatentSample:
    """z by reparameterisation; s from the component picked by a per-example switch.

    ``rng`` is a ``Noise`` or anything ``Noise`` accepts. ``post_s_y`` may be
    ``None`` when ``alpha == 1``.
    """
    _check_alpha(alpha)
    noise = rng if isinstance(rng, Noise) else Noise(rng)
    B = post_z.mean.shape[0]
    z = reparameterize(post_z, noise["eps_z"].standard_normal(post_z.mean.shape))
    a = draw_switch(noise["switch"], B, alpha)
    if post_s_x is None and post_s_y is None:
        return LatentSample(z, None, a)
    shape = (post_s_x or post_s_y).mean.shape
    eps_s = noise["eps_s"].standard_normal(shape)
    if post_s_y is None or a.all():
        if post_s_x is None:
            raise ContractError("switch selected the text posterior but none was given")
        s = reparameterize(post_s_x, eps_s)
        if post_s_y is not None:
            s = mix_components(a, s, reparameterize(post_s_y, eps_s))
    elif post_s_x is None:
        if a.any():
            raise ContractError("switch selected the text posterior but none was given")
        s = reparameterize(post_s_y, eps_s)
    else:
        s = mix_components(a, reparameterize(post_s_x, eps_s), reparameterize(post_s_y, eps_s))
    return LatentSample(z, s, a)


def kl_gaussian_standard(post: GaussianParams) -> Tensor:
    """Closed-form KL(N(mu, exp(log_var)) || N(0, I)) per example."""
    mu, lv = post.mean, post.log_var
    ones = Tensor(np.ones(mu.shape, dtype=np.float32))
    inner = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(lv)), ad.add(ones, lv))
    return ad.scale(ad.sum(inner, axis=-1), 0.5)


def _log_normal_unnorm(s: Tensor, post: GaussianParams) -> Tensor:
    """log N(s; mu, diag exp(lv)) without the shared -d/2 log(2 pi) term."""
    diff = ad.sub(s, post.mean)
    quad = ad.mul(ad.mul(diff, diff), ad.exp(ad.scale(post.log_var, -1.0)))
    return ad.scale(ad.sum(ad.add(quad, post.log_var), axis=-1), -0.5)


def _log_std_normal_unnorm(s: Tensor) -> Tensor:
    return ad.scale(ad.sum(ad.mul(s, s), axis=-1), -0.5)


def _repeat_rows(t: Tensor, k: int) -> Tensor:
    if k == 1:
        return t
    B = t.shape[0]
    sel = np.tile(np.eye(B, dtype=np.float32), (k, 1))
    return ad.matmul(Tensor(sel), t)


def log_mixture_density(s: Tensor, post_x: GaussianParams, post_y: GaussianParams, alpha: float) -> Tensor:
    """log(alpha N(s; x-side) + (1 - alpha) N(s; y-side)), normalising constant dropped.

    Stabilised by subtracting a constant offset (the larger live component); the
    offset carries no gradient and cancels exactly.
    """
    lx = _log_normal_unnorm(s, post_x)
    ly = _log_normal_unnorm(s, post_y)
    if alpha == 1.0:
        return lx
    if alpha == 0.0:
        return ly
    m = np.maximum(lx.data, ly.data)
    mt = Tensor(m)
    wx = ad.scale(ad.exp(ad.sub(lx, mt)), alpha)
    wy = ad.scale(ad.exp(ad.sub(ly, mt)), 1.0 - alpha)
    return ad.add(ad.log(ad.add(wx, wy)), mt)


def kl_mixture_mc(
    post_s_x: GaussianParams,
    post_s_y: GaussianParams,
    alpha: float,
    n_samples: int,
    rng,
) -> Tensor:
    """Monte-Carlo KL(q(s|x,y) || N(0, I)) per example for the two-component mixture.

    Each of the ``n_samples`` draws picks a component by a Bernoulli(alpha)
    switch and reparameterises it; the estimate averages
    ``log q(s_k) - log p(s_k)`` with ``q`` the full mixture density.
    """
    _check_alpha(alpha)
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    gen = rng["kl"] if isinstance(rng, Noise) else (
        rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    )
    B, d = post_s_x.mean.shape
    K = n_samples
    px = GaussianParams(_repeat_rows(post_s_x.mean, K), _repeat_rows(post_s_x.log_var, K))
    py = GaussianParams(_repeat_rows(post_s_y.mean, K), _repeat_rows(post_s_y.log_var, K))
    a = draw_switch(gen, K * B, alpha)
    eps = gen.standard_normal((K * B, d))
    s = mix_components(a, reparameterize(px, eps), reparameterize(py, eps))
    diff = ad.sub(log_mixture_density(s, px, py, alpha), _log_std_normal_unnorm(s))
    if K == 1:
        return diff
    return ad.mean(ad.reshape(diff, (K, B)), axis=0)


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------


def init_state(dec: Decoder, latent: Tensor) -> LstmState:
    return LstmState(dec.init_h(latent), dec.init_c(latent))


def decoder_step(
    dec: Decoder, fused, state: LstmState, tokens, feed: Tensor | None, dropout: float = 0.0, noise=None, stream=""
) -> tuple[LstmState, Tensor]:
    """Advance one step on ``tokens`` and return (new state, logits)."""
    inp = embed(dec.embed, tokens)
    if dropout > 0:
        inp = _maybe_dropout(inp, dropout, noise[stream])
    if feed is not None:
        inp = ad.concat([inp, feed])
    state = lstm_step(fused, inp, state)
    h = _maybe_dropout(state.h, dropout, noise[stream]) if dropout > 0 else state.h
    return state, dec.out(h)


def teacher_forced_nll(
    dec: Decoder,
    latent_init: Tensor,
    feed: Tensor | None,
    seq: SeqBatch,
    dropout: float = 0.0,
    noise: Noise | None = None,
    stream: str = "",
) -> Tensor:
    """Per-example sum over non-pad target positions of -log p(token | prefix, latents)."""
    if seq.lengths.size == 0 or seq.lengths.min() < 1:
        raise ContractError("decoder targets must have length >= 1")
    steps = int(seq.lengths.max()) + 1
    B = seq.lengths.shape[0]
    inp = embed(dec.embed, seq.dec_in[:, :steps])
    if dropout > 0:
        inp = _maybe_dropout(inp, dropout, noise[stream])
    h_all = lstm_sequence(dec.lstm, inp, init_state(dec, latent_init), static=feed)
    if dropout > 0:
        h_all = _maybe_dropout(h_all, dropout, noise[stream])
    H = dec.lstm.hidden_dim
    logits = dec.out(ad.reshape(h_all, (B * steps, H)))
    nll = ad.softmax_cross_entropy(logits, seq.dec_out[:, :steps].reshape(-1))
    mask = seq.dec_mask[:, :steps]
    if not mask.all():
        nll = ad.mul(nll, Tensor(mask.reshape(-1)))
    return ad.sum(ad.reshape(nll, (B, steps)), axis=1)


def decode_x_nll(params: SavaeParams, z: Tensor, s: Tensor | None, x: SeqBatch, dropout=0.0, noise=None) -> Tensor:
    if params.config.has_syntax and s is None:
        raise ContractError("text decoder needs s")
    return teacher_forced_nll(params.dec_x, z, s, x, dropout, noise, "dropout_dec_x")


def decode_y_nll(params: SavaeParams, s: Tensor, y: SeqBatch, dropout=0.0, noise=None) -> Tensor:
    if params.dec_y is None:
        raise ContractError("model has no syntax decoder (d_s == 0)")
    return teacher_forced_nll(params.dec_y, s, None, y, dropout, noise, "dropout_dec_y")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossReport:
    """Batch means (nats per example) plus token counts for per-token rates."""

    loss: float
    recon_x: float
    recon_y: float
    kl_z: float
    kl_s: float
    kl_weight: float
    batch_size: int
    tokens_x: int
    tokens_y: int
    switch_x: int  # examples whose s came from the text encoder


def _mean_scalar(t: Tensor | None) -> float:
    return 0.0 if t is None else float(np.mean(t.data, dtype=np.float64))


def _combine(kl_weight: float, parts: list[Tensor | None], kls: list[Tensor | None]) -> Tensor:
    kl_terms = [k for k in kls if k is not None]
    total = None
    if kl_terms:
        kl = kl_terms[0]
        for k in kl_terms[1:]:
            kl = ad.add(kl, k)
        total = ad.scale(kl, kl_weight)
    for p in parts:
        if p is not None:
            total = p if total is None else ad.add(total, p)
    return ad.mean(total)


def loss_supervised(
    params: SavaeParams,
    batch: Batch,
    alpha: float = 0.5,
    kl_weight: float = 1.0,
    n_kl_samples: int = 1,
    rng=None,
    dropout: float = 0.0,
    recon_x: bool = True,
    recon_y: bool = True,
    kl_s_estimator: str = "auto",
) -> tuple[Tensor, LossReport]:
    """Negative ELBO when both text and syntax are observed, averaged over the batch.

    loss = kl_weight * (KL_z + KL_s) + recon_x + recon_y

    ``kl_s_estimator`` is ``"mc"`` (Monte-Carlo over the mixture), ``"analytic"``
    (only legal when ``alpha`` is 0 or 1, where the mixture is one Gaussian) or
    ``"auto"`` (analytic for degenerate ``alpha``, MC otherwise).
    """
    _check_alpha(alpha)
    if batch.y is None:
        raise ContractError("batch has no syntax sequences; use loss_unsupervised for text-only data")
    if not params.config.has_syntax:
        raise ContractError("model has no syntactic latent; use loss_unsupervised")
    degenerate = alpha in (0.0, 1.0)
    if kl_s_estimator == "auto":
        kl_s_estimator = "analytic" if degenerate else "mc"
    if kl_s_estimator == "analytic" and not degenerate:
        raise ContractError("analytic KL_s needs alpha in {0, 1}")
    if kl_s_estimator not in ("mc", "analytic"):
        raise ContractError(f"unknown kl_s_estimator {kl_s_estimator!r}")
    if dropout > 0 and rng is None:
        raise ContractError("dropout needs an rng")

    noise = rng if isinstance(rng, Noise) else Noise(rng)
    post_z = encode_z(params, batch.x, dropout, noise["dropout_enc_z"] if dropout > 0 else None)
    post_sx = post_sy = None
    if alpha > 0.0:
        post_sx = encode_s_from_x(params, batch.x, dropout, noise["dropout_enc_sx"] if dropout > 0 else None)
    if alpha < 1.0:
        post_sy = encode_s_from_y(params, batch.y, dropout, noise["dropout_enc_sy"] if dropout > 0 else None)
    lat = sample_latents(post_z, post_sx, post_sy, alpha, noise)

    kl_z = kl_gaussian_standard(post_z)
    if kl_s_estimator == "analytic":
        kl_s = kl_gaussian_standard(post_sx if alpha == 1.0 else post_sy)
    else:
        px = post_sx if post_sx is not None else post_sy
        py = post_sy if post_sy is not None else post_sx
        kl_s = kl_mixture_mc(px, py, alpha, n_kl_samples, noise)

    rx = decode_x_nll(params, lat.z, lat.s, batch.x, dropout, noise) if recon_x else None
    ry = decode_y_nll(params, lat.s, batch.y, dropout, noise) if recon_y else None
    loss = _combine(kl_weight, [rx, ry], [kl_z, kl_s])
    report = LossReport(
        loss=float(loss.data),
        recon_x=_mean_scalar(rx),
        recon_y=_mean_scalar(ry),
        kl_z=_mean_scalar(kl_z),
        kl_s=_mean_scalar(kl_s),
        kl_weight=kl_weight,
        batch_size=batch.size,
        tokens_x=int(batch.x.lengths.sum() + batch.size),
        tokens_y=int(batch.y.lengths.sum() + batch.size),
        switch_x=int(lat.a.sum()),
    )
    return loss, report


def loss_unsupervised(
    params: SavaeParams,
    batch: Batch,
    kl_weight: float = 1.0,
    rng=None,
    dropout: float = 0.0,
) -> tuple[Tensor, LossReport]:
    """Negative ELBO when only text is observed: s is inferred from x alone and
    both KL terms are closed-form. With ``d_s == 0`` this is the vanilla LSTM-VAE."""
    if dropout > 0 and rng is None:
        raise ContractError("dropout needs an rng")
    noise = rng if isinstance(rng, Noise) else Noise(rng)
    post_z = encode_z(params, batch.x, dropout, noise["dropout_enc_z"] if dropout > 0 else None)
    post_sx = None
    if params.config.has_syntax:
        post_sx = encode_s_from_x(params, batch.x, dropout, noise["dropout_enc_sx"] if dropout > 0 else None)
    lat = sample_latents(post_z, post_sx, None, 1.0, noise)
    kl_z = kl_gaussian_standard(post_z)
    kl_s = kl_gaussian_standard(post_sx) if post_sx is not None else None
    rx = decode_x_nll(params, lat.z, lat.s, batch.x, dropout, noise)
    loss = _combine(kl_weight, [rx], [kl_z, kl_s])
    report = LossReport(
        loss=float(loss.data),
        recon_x=_mean_scalar(rx),
        recon_y=0.0,
        kl_z=_mean_scalar(kl_z),
        kl_s=_mean_scalar(kl_s),
        kl_weight=kl_weight,
        batch_size=batch.size,
        tokens_x=int(batch.x.lengths.sum() + batch.size),
        tokens_y=0,
        switch_x=batch.size,
    )
    return loss, report

