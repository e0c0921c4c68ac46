"""Minimal reverse-mode automatic differentiation over float32 arrays.

Every differentiable operation appends a node to the graph of the current
thread. Nodes are appended in evaluation order, so the list is already a
topological order and ``backward`` simply walks it in reverse.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> backward(sum(mul(x, x)))
    >>> x.grad
    array([2., 4., 6.], dtype=float32)
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels

DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible for an op."""


class NumericRangeError(ArithmeticError):
    """A finite input produced a non-finite result (overflow, log of <= 0)."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class Tensor:
    """Dense float32 array with an optional gradient and graph position."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    output: Tensor


class Graph:
    """Append-only record of the ops evaluated since the last backward."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node = None
        self.nodes = []


_local = threading.local()


def active_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None:
        g = _local.graph = Graph()
    return g


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording graph nodes."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _record(kind: str, out: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    if grad_enabled() and any(t.requires_grad for t in inputs):
        t = Tensor(out, requires_grad=True)
        g = active_graph()
        t.node = len(g.nodes)
        g.nodes.append(Node(kind, inputs, bwd, t))
        return t
    return Tensor(out)


def custom_op(kind: str, out: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    """Record a composite op whose ``bwd(g)`` returns one gradient (or None) per input."""
    return _record(kind, np.asarray(out, dtype=DTYPE), tuple(inputs), bwd)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or a batch ``[..., n, k] @ [k, m]`` / ``[..., n, k] @ [..., k, m]``."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def bwd(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _record("matmul", out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last dimension (all leading dims must agree)."""
    if axis != -1:
        raise ContractError("concat only supports the last dimension")
    tensors = tuple(tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def bwd(g):
        return [g[..., bounds[i] : bounds[i + 1]] for i in range(len(tensors))]

    return _record("concat", out, tensors, bwd)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing: ints and slices."""
    shape = a.shape
    try:
        out = a.data[key]
    except IndexError as exc:
        raise DimensionError(f"slice: {key!r} invalid for shape {shape}") from exc

    def bwd(g):
        ga = np.zeros(shape, dtype=DTYPE)
        ga[key] = g
        return (ga,)

    return _record("slice", np.ascontiguousarray(out), (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)) and np.all(np.isfinite(a.data)):
        raise NumericRangeError(f"exp overflow (max input {a.data.max():.4g})")
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if x.size and x.min() <= 0:
        raise NumericRangeError(f"log of non-positive value (min input {x.min():.4g})")
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    out = np.clip(x, lo, hi)
    inside = ((x >= lo) & (x <= hi)).astype(DTYPE)
    return _record("clamp", out, (a,), lambda g: (g * inside,))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: shape mismatch {logits.shape} vs targets {targets.shape}"
        )
    v = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"softmax_cross_entropy: target id out of range for {v} classes")
    nll, probs = kernels.softmax_xent(logits.data, targets)
    rows = np.arange(targets.shape[0])

    def bwd(g):
        d = probs.copy()
        d[rows, targets] -= 1.0
        return (d * g[:, None],)

    return _record("softmax_cross_entropy", nll, (logits,), bwd)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight``; output shape is ``ids.shape + (dim,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab, dim = weight.shape
    bad = np.argwhere((ids < 0) | (ids >= vocab))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise IndexError(f"embedding: id {int(ids[pos])} at position {pos} out of range [0, {vocab})")
    out = weight.data[ids]

    def bwd(g):
        gw = np.zeros((vocab, dim), dtype=DTYPE)
        kernels.scatter_add_rows(gw, ids.reshape(-1), g.reshape(-1, dim))
        return (gw,)

    return _record("embedding", out, (weight,), bwd)


def dropout(a: Tensor, mask) -> Tensor:
    """Multiply by a caller-supplied (already rescaled) mask."""
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != a.shape:
        raise DimensionError(f"dropout: shape mismatch {a.shape} vs mask {mask.shape}")
    return _record("dropout", a.data * mask, (a,), lambda g: (g * mask,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = np.sum(a.data, axis=axis, dtype=DTYPE)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return _record("sum", out, (a,), bwd)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]
    out = np.mean(a.data, axis=axis, dtype=DTYPE)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, shape) / DTYPE(n)).astype(DTYPE),)

    return _record("mean", out, (a,), bwd)


def bias_add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b`` with ``b`` broadcast over every leading dimension of ``a``."""
    if b.data.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: shape mismatch {a.shape} vs {b.shape}")
    lead = tuple(range(a.data.ndim - 1))
    return _record("bias_add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "clamp": clamp,
    "softmax_cross_entropy": softmax_cross_entropy,
    "embedding": embedding,
    "dropout": dropout,
    "sum": sum,
    "mean": mean,
    "bias_add": bias_add,
}


def op_forward(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch by op name; non-tensor arguments (ids, masks, keys) go in ``inputs`` too."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The graph of the calling thread is released afterwards.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = active_graph()
    if loss.node is None or loss.node >= len(graph.nodes) or graph.nodes[loss.node].output is not loss:
        raise ContractError("loss is not on the active graph")

    grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=DTYPE)}
    nodes = graph.nodes
    for idx in range(loss.node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=DTYPE)
            if t.node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                prev = grads.get(t.node)
                grads[t.node] = gi if prev is None else prev + gi
    graph.clear()


def reset_graph() -> None:
    """Drop any nodes recorded on this thread without running backward."""
    active_graph().clear()
