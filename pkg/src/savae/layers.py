"""Embedding tables, affine maps and a single-layer LSTM cell."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

INIT_RANGE = 0.08
FORGET_BIAS = 1.0
GATES = ("i", "f", "o", "g")


def uniform_param(rng: np.random.Generator, shape, name: str) -> Tensor:
    data = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class EmbeddingTable:
    weights: Tensor

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, rng, vocab_size: int, dim: int, name: str) -> "EmbeddingTable":
        return cls(uniform_param(rng, (vocab_size, dim), f"{name}.weight"))

    def tensors(self) -> list[Tensor]:
        return [self.weights]


@dataclass
class Linear:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, name: str) -> "Linear":
        return cls(uniform_param(rng, (n_in, n_out), f"{name}.W"), uniform_param(rng, (n_out,), f"{name}.b"))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(self.W, self.b, x)

    def tensors(self) -> list[Tensor]:
        return [self.W, self.b]


@dataclass
class LstmCellParams:
    """Per-gate input weights ``W``, recurrent weights ``U`` and biases ``b``.

    Each mapping is keyed by gate name (``i``, ``f``, ``o``, ``g``).
    """

    W: dict[str, Tensor]
    U: dict[str, Tensor]
    b: dict[str, Tensor]

    @property
    def input_dim(self) -> int:
        return self.W["i"].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.U["i"].shape[0]

    @classmethod
    def init(cls, rng, input_dim: int, hidden_dim: int, name: str) -> "LstmCellParams":
        W = {k: uniform_param(rng, (input_dim, hidden_dim), f"{name}.W_{k}") for k in GATES}
        U = {k: uniform_param(rng, (hidden_dim, hidden_dim), f"{name}.U_{k}") for k in GATES}
        b = {k: uniform_param(rng, (hidden_dim,), f"{name}.b_{k}") for k in GATES}
        b["f"].data[:] = FORGET_BIAS
        return cls(W, U, b)

    def tensors(self) -> list[Tensor]:
        return [self.W[k] for k in GATES] + [self.U[k] for k in GATES] + [self.b[k] for k in GATES]

    def fused(self) -> "FusedLstm":
        """Concatenate the gate blocks once so a sequence run needs one matmul per step."""
        return FusedLstm(
            ad.concat([self.W[k] for k in GATES]),
            ad.concat([self.U[k] for k in GATES]),
            ad.concat([self.b[k] for k in GATES]),
            self.hidden_dim,
        )


@dataclass
class FusedLstm:
    W: Tensor
    U: Tensor
    b: Tensor
    hidden_dim: int


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden_dim: int) -> "LstmState":
        z = np.zeros((batch, hidden_dim), dtype=np.float32)
        return cls(Tensor(z), Tensor(z.copy()))


def embed(table: EmbeddingTable, ids) -> Tensor:
    return ad.embedding(table.weights, ids)


def linear(W: Tensor, b: Tensor, x: Tensor) -> Tensor:
    return ad.bias_add(ad.matmul(x, W), b)


def lstm_step(params: LstmCellParams | FusedLstm, x_t: Tensor, state: LstmState) -> LstmState:
    """One LSTM transition without peepholes.

    i, f, o = sigmoid(x W + h U + b); g = tanh(x W_g + h U_g + b_g);
    c' = f * c + i * g; h' = o * tanh(c').
    """
    fused = params if isinstance(params, FusedLstm) else params.fused()
    H = fused.hidden_dim
    if x_t.data.ndim != 2 or x_t.shape[1] != fused.W.shape[0]:
        raise DimensionError(f"lstm_step: input shape {x_t.shape} vs W {fused.W.shape}")
    if state.h.shape != (x_t.shape[0], H) or state.c.shape != state.h.shape:
        raise DimensionError(f"lstm_step: state shapes {state.h.shape}/{state.c.shape} vs hidden {H}")
    pre = ad.bias_add(ad.add(ad.matmul(x_t, fused.W), ad.matmul(state.h, fused.U)), fused.b)
    i = ad.sigmoid(ad.slice_(pre, (slice(None), slice(0, H))))
    f = ad.sigmoid(ad.slice_(pre, (slice(None), slice(H, 2 * H))))
    o = ad.sigmoid(ad.slice_(pre, (slice(None), slice(2 * H, 3 * H))))
    g = ad.tanh(ad.slice_(pre, (slice(None), slice(3 * H, 4 * H))))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return LstmState(h, c)


def masked_update(new: LstmState, old: LstmState, keep_new: np.ndarray) -> LstmState:
    """Carry ``old`` through rows where ``keep_new`` is 0 (right-padding)."""
    m = np.broadcast_to(keep_new[:, None], new.h.shape).astype(np.float32)
    keep = Tensor(m)
    hold = Tensor(1.0 - m)
    return LstmState(
        ad.add(ad.mul(new.h, keep), ad.mul(old.h, hold)),
        ad.add(ad.mul(new.c, keep), ad.mul(old.c, hold)),
    )


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_sequence(
    params: LstmCellParams | FusedLstm,
    x: Tensor,
    state: LstmState,
    lengths: np.ndarray | None = None,
    static: Tensor | None = None,
) -> Tensor:
    """Run the cell over ``x[:, t]`` for every t and return all hidden states ``[B, T, H]``.

    Computes exactly what a loop of ``lstm_step`` (plus ``masked_update`` past
    each row's length) computes, but records a single graph node: the input
    projection is one matmul over all steps and the weight gradients are
    accumulated once after back-propagating through time. ``static`` is an
    extra per-example input appended to every step; its rows of ``W`` follow
    those of ``x``. Rows past their length carry their last state, so
    ``out[:, -1]`` is the state at each row's true length.
    """
    fused = params if isinstance(params, FusedLstm) else params.fused()
    H = fused.hidden_dim
    W, U, b = fused.W.data, fused.U.data, fused.b.data
    B, T, n_x = x.shape
    n_s = 0 if static is None else static.shape[1]
    if x.data.ndim != 3 or n_x + n_s != W.shape[0]:
        raise DimensionError(f"lstm_sequence: input width {n_x}+{n_s} vs W {W.shape}")
    if state.h.shape != (B, H) or state.c.shape != (B, H):
        raise DimensionError(f"lstm_sequence: state shapes {state.h.shape}/{state.c.shape} vs hidden {H}")
    if static is not None and static.shape[0] != B:
        raise DimensionError(f"lstm_sequence: static rows {static.shape[0]} vs batch {B}")
    Wx, Ws = W[:n_x], W[n_x:]
    pre_x = (x.data.reshape(B * T, n_x) @ Wx).reshape(B, T, 4 * H)
    base = b if static is None else static.data @ Ws + b
    keep = None if lengths is None else (np.arange(T)[None, :] < np.asarray(lengths)[:, None])

    h_all = np.empty((B, T, H), dtype=np.float32)
    h_prev = np.empty((B, T, H), dtype=np.float32)
    c_prev = np.empty((B, T, H), dtype=np.float32)
    gates = np.empty((B, T, 4 * H), dtype=np.float32)
    tanh_c = np.empty((B, T, H), dtype=np.float32)
    h, c = state.h.data, state.c.data
    for t in range(T):
        h_prev[:, t], c_prev[:, t] = h, c
        pre = pre_x[:, t] + h @ U + base
        gt = gates[:, t]
        gt[:, : 3 * H] = _sigmoid(pre[:, : 3 * H])
        gt[:, 3 * H :] = np.tanh(pre[:, 3 * H :])
        i, f, o, g = gt[:, :H], gt[:, H : 2 * H], gt[:, 2 * H : 3 * H], gt[:, 3 * H :]
        c_new = f * c + i * g
        tanh_c[:, t] = np.tanh(c_new)
        h_new = o * tanh_c[:, t]
        if keep is not None and not keep[:, t].all():
            m = keep[:, t, None]
            h_new = np.where(m, h_new, h)
            c_new = np.where(m, c_new, c)
        h, c = h_new, c_new
        h_all[:, t] = h

    def bwd(gh_all):
        d_pre = np.empty((B, T, 4 * H), dtype=np.float32)
        dh = np.zeros((B, H), dtype=np.float32)
        dc = np.zeros((B, H), dtype=np.float32)
        for t in range(T - 1, -1, -1):
            dh = dh + gh_all[:, t]
            if keep is not None and not keep[:, t].all():
                m = keep[:, t, None].astype(np.float32)
                dh_carry, dc_carry = dh * (1 - m), dc * (1 - m)
                dh, dc = dh * m, dc * m
            else:
                dh_carry = dc_carry = None
            gt = gates[:, t]
            i, f, o, g = gt[:, :H], gt[:, H : 2 * H], gt[:, 2 * H : 3 * H], gt[:, 3 * H :]
            tc = tanh_c[:, t]
            dc = dc + dh * o * (1 - tc * tc)
            dp = d_pre[:, t]
            dp[:, :H] = dc * g * i * (1 - i)
            dp[:, H : 2 * H] = dc * c_prev[:, t] * f * (1 - f)
            dp[:, 2 * H : 3 * H] = dh * tc * o * (1 - o)
            dp[:, 3 * H :] = dc * i * (1 - g * g)
            dh = dp @ U.T
            dc = dc * f
            if dh_carry is not None:
                dh = dh + dh_carry
                dc = dc + dc_carry
        flat = d_pre.reshape(B * T, 4 * H)
        gWx = x.data.reshape(B * T, n_x).T @ flat
        gU = h_prev.reshape(B * T, H).T @ flat
        d_base = d_pre.sum(axis=1)
        gb = d_base.sum(axis=0)
        gx = (flat @ Wx.T).reshape(B, T, n_x)
        if static is None:
            return gx, gWx, gU, gb, dh, dc
        gW = np.concatenate([gWx, static.data.T @ d_base], axis=0)
        return gx, gW, gU, gb, dh, dc, d_base @ Ws.T

    inputs = (x, fused.W, fused.U, fused.b, state.h, state.c)
    if static is not None:
        inputs += (static,)
    return ad.custom_op("lstm_sequence", h_all, inputs, bwd)
