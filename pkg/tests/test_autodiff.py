import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from savae import autodiff as ad
from savae.autodiff import ContractError, DimensionError, NumericRangeError, Tensor

from gradcheck import check_op, max_violation, numeric_grad, op_cases


def rand(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# forward examples
# ---------------------------------------------------------------------------


def test_matmul_identity():
    A = np.arange(9, dtype=np.float32).reshape(3, 3) - 4
    out = ad.matmul(Tensor(np.eye(3)), Tensor(A))
    assert np.array_equal(out.data, A)


def test_sigmoid_of_zero():
    assert np.array_equal(ad.sigmoid(Tensor(np.zeros((2, 3)))).data, np.full((2, 3), 0.5, np.float32))


def test_xent_uniform_four_classes():
    nll = ad.softmax_cross_entropy(Tensor(np.zeros((1, 4))), [2])
    assert nll.data[0] == pytest.approx(math.log(4), abs=1e-6)


def test_xent_extreme_logits_stay_finite():
    logits = Tensor(np.array([[1e4, -1e4, 0.0]], dtype=np.float32))
    assert np.isfinite(ad.softmax_cross_entropy(logits, [1]).data).all()


def test_batched_matmul_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 2, 3, 4), rand(rng, 4, 5)
    assert np.allclose(ad.matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-6)


def test_bias_add_broadcasts_last_dim():
    out = ad.bias_add(Tensor(np.zeros((2, 3, 4))), Tensor(np.arange(4)))
    assert np.array_equal(out.data[1, 2], np.arange(4, dtype=np.float32))


def test_operators_route_to_ops():
    x = Tensor([1.0, 2.0])
    assert np.array_equal((x + x).data, [2, 4])
    assert np.array_equal((x - x).data, [0, 0])
    assert np.array_equal((x * x).data, [1, 4])
    assert np.array_equal((3 * x).data, [3, 6])
    assert np.array_equal((-x).data, [-1, -2])
    assert np.array_equal(x[1:].data, [2])


def test_op_forward_dispatch():
    x = Tensor([[1.0, -1.0]])
    assert np.array_equal(ad.op_forward("tanh", [x]).data, np.tanh(x.data))
    out = ad.op_forward("concat", [x, x])
    assert out.shape == (1, 4)
    with pytest.raises(ContractError):
        ad.op_forward("conv2d", [x])


# ---------------------------------------------------------------------------
# backward examples
# ---------------------------------------------------------------------------


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.sum(ad.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_accumulates_over_uses():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    ad.backward(ad.add(ad.sum(x), ad.sum(x)))
    assert np.array_equal(x.grad, np.full((2, 2), 2.0))


def test_grads_accumulate_across_backward_calls():
    x = Tensor([1.0], requires_grad=True)
    ad.backward(ad.sum(x))
    ad.backward(ad.sum(x))
    assert x.grad[0] == 2.0


def test_matmul_finite_difference():
    # At h=1e-3 the float32 rounding of the outputs alone would swamp a 1e-3
    # relative tolerance, so the differenced function is a float64 reference.
    rng = np.random.default_rng(1)
    x, W = rand(rng, 4, 5), rand(rng, 5, 3)
    xt, Wt = Tensor(x, requires_grad=True), Tensor(W, requires_grad=True)
    ad.backward(ad.sum(ad.matmul(xt, Wt)))
    num_x = numeric_grad(lambda a: float(np.sum(a.astype(np.float64) @ W.astype(np.float64))), x, 1e-3)
    num_W = numeric_grad(lambda b: float(np.sum(x.astype(np.float64) @ b.astype(np.float64))), W, 1e-3)
    for analytic, numeric in ((xt.grad, num_x), (Wt.grad, num_W)):
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-5)
        assert rel.max() < 1e-3


def test_backward_is_deterministic():
    rng = np.random.default_rng(2)
    x0, w0 = rand(rng, 3, 4), rand(rng, 4, 6)

    def run():
        x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
        h = ad.tanh(ad.matmul(x, w))
        loss = ad.sum(ad.softmax_cross_entropy(h, [0, 3, 5]))
        ad.backward(loss)
        return x.grad, w.grad

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_no_grad_records_nothing():
    ad.reset_graph()
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum(ad.exp(ad.mul(x, x)))
    assert len(ad.active_graph()) == 0
    assert y.node is None


def test_constants_record_nothing():
    ad.reset_graph()
    ad.sum(ad.tanh(Tensor(np.ones(3))))
    assert len(ad.active_graph()) == 0


def test_graph_is_topologically_ordered():
    ad.reset_graph()
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.sum(ad.mul(ad.exp(x), x))
    nodes = ad.active_graph().nodes
    for idx, node in enumerate(nodes):
        for t in node.inputs:
            assert t.node is None or t.node < idx
    ad.backward(y)
    assert len(ad.active_graph()) == 0


def test_graphs_are_thread_local():
    seen = {}

    def worker(name, scale):
        x = Tensor(np.full(4, scale, dtype=np.float32), requires_grad=True)
        loss = ad.sum(ad.mul(x, x))
        seen[name + "_nodes"] = len(ad.active_graph())
        ad.backward(loss)
        seen[name] = x.grad

    threads = [threading.Thread(target=worker, args=(f"t{i}", i + 1.0)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(4):
        assert seen[f"t{i}_nodes"] == 2
        assert np.array_equal(seen[f"t{i}"], np.full(4, 2 * (i + 1.0)))


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(DimensionError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(DimensionError, match="add"):
        ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(DimensionError, match="concat"):
        ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])
    with pytest.raises(DimensionError, match="bias_add"):
        ad.bias_add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))
    with pytest.raises(DimensionError, match="dropout"):
        ad.dropout(Tensor(np.zeros((2, 3))), np.ones((3, 2)))
    with pytest.raises(DimensionError, match="softmax_cross_entropy"):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0])


def test_exp_overflow_reported():
    with pytest.raises(NumericRangeError):
        ad.exp(Tensor([100.0]))


def test_log_of_nonpositive_reported():
    with pytest.raises(NumericRangeError):
        ad.log(Tensor([1.0, 0.0]))


def test_embedding_out_of_range():
    with pytest.raises(IndexError, match=r"\(0, 1\)"):
        ad.embedding(Tensor(np.zeros((3, 2))), [[0, 3]])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(ad.mul(x, x))
    ad.reset_graph()


def test_backward_needs_graph_membership():
    with pytest.raises(ContractError):
        ad.backward(Tensor(1.0))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, 5, elements=st.floats(-200, 200, width=32)))
def test_exp_never_silently_nonfinite(x):
    try:
        out = ad.exp(Tensor(x))
    except NumericRangeError:
        return
    assert np.isfinite(out.data).all()


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float32, (3, 4), elements=st.floats(-1e4, 1e4, width=32)),
    st.lists(st.integers(0, 3), min_size=3, max_size=3),
)
def test_xent_finite_and_nonnegative(logits, targets):
    nll = ad.softmax_cross_entropy(Tensor(logits), targets).data
    assert np.isfinite(nll).all() and (nll >= 0).all()


# ---------------------------------------------------------------------------
# finite-difference checks for every op
# ---------------------------------------------------------------------------


CASE_NAMES = sorted(op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", CASE_NAMES)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradcheck(name, seed):
    build, inputs, h = op_cases(np.random.default_rng(100 + seed))[name]
    for analytic, numeric in check_op(build, inputs, h=h, seed=seed):
        assert max_violation(analytic, numeric) < 1.0


def test_every_registered_op_has_a_gradcheck():
    covered = {n.split("_batched")[0].replace("_axis", "") for n in CASE_NAMES}
    assert set(ad.OPS) <= covered
