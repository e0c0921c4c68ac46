"""Hot inner loops with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``SAVAE_NO_NUMBA=1`` in the
environment to force the numpy implementations (useful for debugging and for
the benchmark in ``benchmarks/bench_kernels.py``). Both implementations are
always importable as ``numpy_impl`` / ``numba_impl`` so they can be compared
against each other.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the dev environment
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("SAVAE_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _np_softmax_xent(logits: np.ndarray, targets: np.ndarray):
    """Row-wise negative log-likelihood and softmax probabilities.

    Accumulates in float64 and returns float32 arrays ``(nll[N], probs[N, V])``.
    """
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1)
    log_denom = np.log(denom)
    nll = log_denom - z[np.arange(z.shape[0]), targets]
    probs = ez / denom[:, None]
    return nll.astype(np.float32), probs.astype(np.float32)


def _np_scatter_add_rows(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    np.add.at(out, ids, rows)


def _np_edit_distance(a: np.ndarray, b: np.ndarray) -> int:
    n, m = a.shape[0], b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.arange(m + 1, dtype=np.int64)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        # substitution/deletion candidates vectorise; insertion is a running min
        sub = prev[:-1] + (b != a[i - 1])
        dele = prev[1:] + 1
        best = np.minimum(sub, dele)
        for j in range(1, m + 1):
            ins = cur[j - 1] + 1
            cur[j] = best[j - 1] if best[j - 1] < ins else ins
        prev, cur = cur, prev
    return int(prev[m])


def _np_adam_update(p, g, m, v, step, b1, b2, bc2, eps):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= (step * m / (np.sqrt(v / bc2) + eps)).astype(p.dtype)


def _np_sum_squares(x: np.ndarray) -> float:
    flat = x.ravel().astype(np.float64)
    return float(np.dot(flat, flat))


numpy_impl = SimpleNamespace(
    softmax_xent=_np_softmax_xent,
    scatter_add_rows=_np_scatter_add_rows,
    edit_distance=_np_edit_distance,
    adam_update=_np_adam_update,
    sum_squares=_np_sum_squares,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True, error_model="numpy")
    def _nb_softmax_xent(logits, targets):
        n, v = logits.shape
        nll = np.empty(n, dtype=np.float32)
        probs = np.empty((n, v), dtype=np.float32)
        ez = np.empty(v, dtype=np.float64)
        for i in range(n):
            mx = np.float64(logits[i, 0])
            for j in range(1, v):
                if logits[i, j] > mx:
                    mx = np.float64(logits[i, j])
            denom = 0.0
            for j in range(v):
                e = np.exp(np.float64(logits[i, j]) - mx)
                ez[j] = e
                denom += e
            nll[i] = np.log(denom) - (np.float64(logits[i, targets[i]]) - mx)
            inv = 1.0 / denom
            for j in range(v):
                probs[i, j] = ez[j] * inv
        return nll, probs

    @numba.njit(cache=True, error_model="numpy")
    def _nb_scatter_add_rows(out, ids, rows):
        d = out.shape[1]
        for r in range(ids.shape[0]):
            k = ids[r]
            for j in range(d):
                out[k, j] += rows[r, j]

    @numba.njit(cache=True, error_model="numpy")
    def _nb_edit_distance(a, b):
        n, m = a.shape[0], b.shape[0]
        if n == 0:
            return m
        if m == 0:
            return n
        prev = np.empty(m + 1, dtype=np.int64)
        cur = np.empty(m + 1, dtype=np.int64)
        for j in range(m + 1):
            prev[j] = j
        for i in range(1, n + 1):
            cur[0] = i
            ai = a[i - 1]
            for j in range(1, m + 1):
                cost = 0 if ai == b[j - 1] else 1
                best = prev[j - 1] + cost
                if prev[j] + 1 < best:
                    best = prev[j] + 1
                if cur[j - 1] + 1 < best:
                    best = cur[j - 1] + 1
                cur[j] = best
            prev, cur = cur, prev
        return prev[m]

    @numba.njit(cache=True, error_model="numpy")
    def _nb_adam_update(p, g, m, v, step, b1, b2, bc2, eps):
        # float32 arithmetic throughout, matching the numpy path
        pf, gf, mf, vf = p.ravel(), g.ravel(), m.ravel(), v.ravel()
        # complements are taken in float64 first, as numpy does with Python scalars
        c1, c2 = np.float32(1.0 - b1), np.float32(1.0 - b2)
        step, b1, b2, eps = np.float32(step), np.float32(b1), np.float32(b2), np.float32(eps)
        inv_bc2 = np.float32(1.0 / bc2)
        for k in range(pf.shape[0]):
            gk = gf[k]
            mk = b1 * mf[k] + c1 * gk
            vk = b2 * vf[k] + c2 * gk * gk
            mf[k] = mk
            vf[k] = vk
            pf[k] -= step * mk / (np.sqrt(vk * inv_bc2) + eps)

    @numba.njit(cache=True, error_model="numpy")
    def _nb_sum_squares(x):
        acc = 0.0
        for val in x.ravel():
            acc += np.float64(val) * np.float64(val)
        return acc

    numba_impl = SimpleNamespace(
        softmax_xent=_nb_softmax_xent,
        scatter_add_rows=_nb_scatter_add_rows,
        edit_distance=_nb_edit_distance,
        adam_update=_nb_adam_update,
        sum_squares=_nb_sum_squares,
    )
else:  # pragma: no cover
    numba_impl = None


USE_NUMBA = HAVE_NUMBA and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"
_impl = numba_impl if USE_NUMBA else numpy_impl


def softmax_xent(logits: np.ndarray, targets: np.ndarray):
    """Fused log-sum-exp cross-entropy; see ``_np_softmax_xent``."""
    logits = np.ascontiguousarray(logits, dtype=np.float32)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    return _impl.softmax_xent(logits, targets)


def scatter_add_rows(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """In-place ``out[ids[r]] += rows[r]`` with repeated ids accumulating."""
    _impl.scatter_add_rows(
        out, np.ascontiguousarray(ids, dtype=np.int64), np.ascontiguousarray(rows, dtype=out.dtype)
    )


def edit_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Unit-cost Levenshtein distance between two integer-coded sequences."""
    return int(
        _impl.edit_distance(
            np.ascontiguousarray(a, dtype=np.int64), np.ascontiguousarray(b, dtype=np.int64)
        )
    )


def adam_update(p, g, m, v, step: float, b1: float, b2: float, bc2: float, eps: float) -> None:
    """In-place Adam moment and parameter update for one contiguous float32 array.

    ``step`` is the learning rate already divided by the first-moment bias
    correction; ``bc2`` is the second-moment correction ``1 - b2**t``.
    """
    for a in (p, g, m, v):
        if not a.flags.c_contiguous:
            raise ValueError("adam_update needs C-contiguous arrays")
    _impl.adam_update(p, g, m, v, step, b1, b2, bc2, eps)


def sum_squares(x: np.ndarray) -> float:
    """Sum of squared entries, accumulated in float64."""
    return float(_impl.sum_squares(np.ascontiguousarray(x)))
