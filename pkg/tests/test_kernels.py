import os
import subprocess
import sys

import numpy as np
import pytest

from savae import kernels

pytestmark = pytest.mark.skipif(kernels.numba_impl is None, reason="numba not installed")


def test_softmax_xent_backends_agree():
    rng = np.random.default_rng(0)
    logits = (rng.normal(size=(37, 23)) * 5).astype(np.float32)
    targets = rng.integers(0, 23, size=37)
    a = kernels.numpy_impl.softmax_xent(logits, targets)
    b = kernels.numba_impl.softmax_xent(logits, targets)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-6, atol=1e-7)


def test_softmax_xent_probabilities_sum_to_one():
    logits = np.array([[0.0, 1.0, 2.0], [50.0, -50.0, 0.0]], dtype=np.float32)
    nll, probs = kernels.softmax_xent(logits, np.array([2, 0]))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    expected = np.log(np.exp([0.0, 1.0, 2.0]).sum()) - 2.0
    assert nll[0] == pytest.approx(expected, rel=1e-6)


def test_scatter_add_backends_agree_with_repeats():
    rng = np.random.default_rng(1)
    ids = np.array([3, 1, 3, 3, 0])
    rows = rng.normal(size=(5, 4)).astype(np.float32)
    a = np.zeros((6, 4), np.float32)
    b = np.zeros((6, 4), np.float32)
    kernels.numpy_impl.scatter_add_rows(a, ids, rows)
    kernels.numba_impl.scatter_add_rows(b, ids, rows)
    assert np.allclose(a, b, atol=1e-6)
    assert np.allclose(a[3], rows[0] + rows[2] + rows[3], atol=1e-6)
    assert not a[5].any()


@pytest.mark.parametrize("seed", range(5))
def test_edit_distance_backends_agree(seed):
    rng = np.random.default_rng(seed)
    for _ in range(50):
        a = rng.integers(0, 4, size=rng.integers(0, 10))
        b = rng.integers(0, 4, size=rng.integers(0, 10))
        assert kernels.numpy_impl.edit_distance(a, b) == kernels.numba_impl.edit_distance(a, b)


def test_adam_update_backends_agree():
    rng = np.random.default_rng(2)
    shape = (7, 5)
    g = rng.normal(size=shape).astype(np.float32)
    states = []
    for impl in (kernels.numpy_impl, kernels.numba_impl):
        p = np.ones(shape, np.float32)
        m = np.zeros(shape, np.float32)
        v = np.zeros(shape, np.float32)
        for t in range(1, 4):
            impl.adam_update(p, g, m, v, 1e-3 / (1 - 0.9**t), 0.9, 0.999, 1 - 0.999**t, 1e-8)
        states.append((p, m, v))
    for x, y in zip(*states):
        assert np.allclose(x, y, rtol=1e-5, atol=1e-7)


def test_adam_update_rejects_strided_views():
    p = np.zeros((4, 4), np.float32)
    with pytest.raises(ValueError):
        kernels.adam_update(p[:, ::2], p[:, ::2], p[:, ::2], p[:, ::2], 1e-3, 0.9, 0.999, 0.001, 1e-8)


def test_sum_squares_backends_agree():
    x = np.random.default_rng(3).normal(size=(100, 3)).astype(np.float32)
    ref = float(np.sum(x.astype(np.float64) ** 2))
    assert kernels.numpy_impl.sum_squares(x) == pytest.approx(ref, rel=1e-12)
    assert kernels.numba_impl.sum_squares(x) == pytest.approx(ref, rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@pytest.mark.parametrize("impl", ["numpy_impl", "numba_impl"])
def test_non_finite_inputs_propagate_instead_of_raising(impl):
    # divergence is detected downstream from NaN losses and gradient norms
    k = getattr(kernels, impl)
    logits = np.array([[np.nan, 1.0, 2.0], [np.inf, 0.0, 1.0]], dtype=np.float32)
    nll, _ = k.softmax_xent(logits, np.array([1, 1]))
    assert not np.isfinite(nll).any()
    for bad in (np.nan, np.inf):
        assert not np.isfinite(k.sum_squares(np.array([1.0, bad], dtype=np.float32)))


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, SAVAE_NO_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from savae import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
