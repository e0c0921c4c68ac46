import math

import numpy as np
import pytest

from savae import autodiff as ad
from savae.autodiff import DimensionError, Tensor
from savae.layers import (
    FORGET_BIAS,
    GATES,
    INIT_RANGE,
    EmbeddingTable,
    LstmCellParams,
    LstmState,
    embed,
    linear,
    lstm_sequence,
    lstm_step,
    masked_update,
)

from gradcheck import lstm_step_violations


def _rand_cell(rng, n_in, n_hid, scale=0.5):
    p = LstmCellParams.init(rng, n_in, n_hid, "cell")
    for t in p.tensors():
        t.data[...] = rng.uniform(-scale, scale, size=t.shape)
    return p


def _scalar_lstm(p: LstmCellParams, x, h, c):
    """Straight-line per-element evaluation of the gate equations in float64."""
    B, H = h.shape
    n_in = x.shape[1]
    W = {k: p.W[k].data.astype(np.float64) for k in GATES}
    U = {k: p.U[k].data.astype(np.float64) for k in GATES}
    b = {k: p.b[k].data.astype(np.float64) for k in GATES}
    h_new = np.zeros((B, H))
    c_new = np.zeros((B, H))
    for r in range(B):
        for j in range(H):
            pre = {}
            for k in GATES:
                acc = b[k][j]
                for q in range(n_in):
                    acc += x[r, q] * W[k][q, j]
                for q in range(H):
                    acc += h[r, q] * U[k][q, j]
                pre[k] = acc
            sig = {k: 1.0 / (1.0 + math.exp(-pre[k])) for k in "ifo"}
            g = math.tanh(pre["g"])
            c_new[r, j] = sig["f"] * c[r, j] + sig["i"] * g
            h_new[r, j] = sig["o"] * math.tanh(c_new[r, j])
    return h_new, c_new


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------


def test_embed_direct_gather():
    table = EmbeddingTable(Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(embed(table, [[0]]).data, [[[1.0, 2.0]]])


def test_embed_repeated_id_accumulates():
    table = EmbeddingTable(Tensor(np.zeros((4, 3)), requires_grad=True))
    ids = np.array([[2, 2, 1], [2, 0, 0]])
    ad.backward(ad.sum(embed(table, ids)))
    assert np.array_equal(table.weights.grad[:, 0], [2.0, 1.0, 3.0, 0.0])


def test_embed_matches_naive_copy():
    rng = np.random.default_rng(0)
    table = EmbeddingTable.init(rng, 11, 5, "emb")
    ids = rng.integers(0, 11, size=(3, 7))
    out = embed(table, ids).data
    for b in range(3):
        for t in range(7):
            for d in range(5):
                assert out[b, t, d] == table.weights.data[ids[b, t], d]


def test_embed_out_of_range_names_position():
    table = EmbeddingTable(Tensor(np.zeros((3, 2))))
    with pytest.raises(IndexError, match=r"position \(1, 0\)"):
        embed(table, [[0, 1], [5, 2]])


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def test_linear_identity():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert np.array_equal(linear(Tensor(np.eye(3)), Tensor(np.zeros(3)), Tensor(x)).data, x)


def test_linear_zero_input_gives_bias():
    out = linear(Tensor(np.ones((3, 2))), Tensor([5.0, -1.0]), Tensor(np.zeros((4, 3)))).data
    assert np.array_equal(out, np.tile([5.0, -1.0], (4, 1)))


def test_linear_matches_naive_triple_loop():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(4, 3)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    x = rng.normal(size=(5, 4)).astype(np.float32)
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            ref[i, j] = b[j] + sum(float(x[i, k]) * float(W[k, j]) for k in range(4))
    assert np.allclose(linear(Tensor(W), Tensor(b), Tensor(x)).data, ref, atol=1e-5)


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        linear(Tensor(np.ones((3, 2))), Tensor(np.zeros(2)), Tensor(np.zeros((4, 5))))


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------


def test_init_ranges_and_forget_bias():
    p = LstmCellParams.init(np.random.default_rng(0), 6, 8, "cell")
    assert len(p.tensors()) == 12
    for k in GATES:
        assert np.abs(p.W[k].data).max() <= INIT_RANGE
        assert np.abs(p.U[k].data).max() <= INIT_RANGE
    assert np.all(p.b["f"].data == FORGET_BIAS)
    assert np.abs(p.b["i"].data).max() <= INIT_RANGE


def test_zero_cell_gives_half_gates_and_zero_state():
    p = LstmCellParams.init(np.random.default_rng(0), 3, 4, "cell")
    for t in p.tensors():
        t.data[...] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
    new = lstm_step(p, x, LstmState.zeros(2, 4))
    assert np.array_equal(new.c.data, np.zeros((2, 4)))
    assert np.array_equal(new.h.data, np.zeros((2, 4)))


def test_saturated_forget_gate_keeps_cell():
    p = LstmCellParams.init(np.random.default_rng(0), 3, 4, "cell")
    for t in p.tensors():
        t.data[...] = 0.0
    p.b["f"].data[...] = 10.0
    c0 = np.random.default_rng(2).normal(size=(2, 4)).astype(np.float32)
    x = Tensor(np.ones((2, 3)))
    new = lstm_step(p, x, LstmState(Tensor(np.zeros((2, 4))), Tensor(c0)))
    # g = tanh(0) = 0, so c' = sigmoid(10) * c0
    assert np.allclose(new.c.data, c0, atol=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_lstm_step_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    p = _rand_cell(rng, 3, 4)
    x = rng.normal(size=(2, 3)).astype(np.float32)
    h = rng.normal(size=(2, 4)).astype(np.float32)
    c = rng.normal(size=(2, 4)).astype(np.float32)
    new = lstm_step(p, Tensor(x), LstmState(Tensor(h), Tensor(c)))
    h_ref, c_ref = _scalar_lstm(p, x.astype(np.float64), h.astype(np.float64), c.astype(np.float64))
    assert np.allclose(new.h.data, h_ref, atol=1e-6)
    assert np.allclose(new.c.data, c_ref, atol=1e-6)


def test_lstm_step_shape_mismatch():
    p = LstmCellParams.init(np.random.default_rng(0), 3, 4, "cell")
    with pytest.raises(DimensionError):
        lstm_step(p, Tensor(np.zeros((2, 5))), LstmState.zeros(2, 4))
    with pytest.raises(DimensionError):
        lstm_step(p, Tensor(np.zeros((2, 3))), LstmState.zeros(3, 4))


@pytest.mark.parametrize("seed", range(4))
def test_lstm_step_gradcheck_all_params(seed):
    violations = lstm_step_violations(seed)
    assert len(violations) == 12
    for name, v in violations.items():
        assert v < 1.0, name


def _unrolled_hand_composed(p, x_seq, H):
    """The same recurrence written out op by op, without ``lstm_step``."""
    W = ad.concat([p.W[k] for k in GATES])
    U = ad.concat([p.U[k] for k in GATES])
    b = ad.concat([p.b[k] for k in GATES])
    B = x_seq.shape[0]
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    for t in range(x_seq.shape[1]):
        xt = ad.slice_(x_seq, (slice(None), t))
        pre = ad.bias_add(ad.add(ad.matmul(xt, W), ad.matmul(h, U)), b)
        i = ad.sigmoid(ad.slice_(pre, (slice(None), slice(0, H))))
        f = ad.sigmoid(ad.slice_(pre, (slice(None), slice(H, 2 * H))))
        o = ad.sigmoid(ad.slice_(pre, (slice(None), slice(2 * H, 3 * H))))
        g = ad.tanh(ad.slice_(pre, (slice(None), slice(3 * H, 4 * H))))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
    return h


def test_unrolled_sequence_gradients_bit_identical():
    rng = np.random.default_rng(5)
    H, T = 4, 6
    p = _rand_cell(rng, 3, H)
    table = EmbeddingTable(Tensor(rng.normal(size=(9, 3)), requires_grad=True))
    ids = rng.integers(0, 9, size=(2, T))

    def via_step():
        emb = embed(table, ids)
        fused = p.fused()
        state = LstmState.zeros(2, H)
        for t in range(T):
            state = lstm_step(fused, ad.slice_(emb, (slice(None), t)), state)
        return state.h

    def via_hand():
        return _unrolled_hand_composed(p, embed(table, ids), H)

    grads = []
    for build in (via_step, via_hand):
        table.weights.grad = None
        ad.backward(ad.sum(build()))
        grads.append(table.weights.grad.copy())
    assert np.array_equal(grads[0], grads[1])


# ---------------------------------------------------------------------------
# whole-sequence kernel
# ---------------------------------------------------------------------------


def _loop_reference(p, x, h0, c0, lengths, static):
    fused = p.fused()
    state = LstmState(h0, c0)
    outs = []
    B, T, _ = x.shape
    for t in range(T):
        inp = ad.slice_(x, (slice(None), t))
        if static is not None:
            inp = ad.concat([inp, static])
        new = lstm_step(fused, inp, state)
        state = new if lengths is None else masked_update(new, state, t < lengths)
        outs.append(state.h)
    return outs


@pytest.mark.parametrize("use_lengths", [False, True])
@pytest.mark.parametrize("use_static", [False, True])
def test_lstm_sequence_matches_step_loop(use_lengths, use_static):
    rng = np.random.default_rng(7)
    B, T, n_x, n_s, H = 4, 5, 3, 2, 6
    p = _rand_cell(rng, n_x + (n_s if use_static else 0), H)
    x = Tensor(rng.normal(size=(B, T, n_x)), requires_grad=True)
    s = Tensor(rng.normal(size=(B, n_s)), requires_grad=True) if use_static else None
    h0 = Tensor(rng.normal(size=(B, H)), requires_grad=True)
    c0 = Tensor(rng.normal(size=(B, H)), requires_grad=True)
    lengths = np.array([5, 3, 1, 4]) if use_lengths else None
    w = rng.normal(size=(B, T, H)).astype(np.float32)
    leaves = p.tensors() + [x, h0, c0] + ([s] if s is not None else [])

    results = []
    for fused_run in (False, True):
        for t in leaves:
            t.grad = None
        if fused_run:
            out = lstm_sequence(p, x, LstmState(h0, c0), lengths, s)
            loss = ad.sum(ad.mul(out, Tensor(w)))
            values = out.data
        else:
            hs = _loop_reference(p, x, h0, c0, lengths, s)
            loss = hs[0]
            terms = [ad.sum(ad.mul(h, Tensor(w[:, t]))) for t, h in enumerate(hs)]
            loss = terms[0]
            for term in terms[1:]:
                loss = ad.add(loss, term)
            values = np.stack([h.data for h in hs], axis=1)
        ad.backward(loss)
        results.append([values] + [t.grad.copy() for t in leaves])
    for a, b in zip(*results):
        assert np.allclose(a, b, atol=2e-6)


def test_lstm_sequence_last_step_is_state_at_length():
    rng = np.random.default_rng(8)
    p = _rand_cell(rng, 3, 4)
    x = rng.normal(size=(2, 5, 3)).astype(np.float32)
    out = lstm_sequence(p, Tensor(x), LstmState.zeros(2, 4), np.array([5, 2]))
    short = lstm_sequence(p, Tensor(x[1:, :2]), LstmState.zeros(1, 4))
    assert np.allclose(out.data[1, -1], short.data[0, -1], atol=1e-7)


def test_lstm_sequence_shape_errors():
    p = LstmCellParams.init(np.random.default_rng(0), 3, 4, "cell")
    with pytest.raises(DimensionError):
        lstm_sequence(p, Tensor(np.zeros((2, 5, 4))), LstmState.zeros(2, 4))
    with pytest.raises(DimensionError):
        lstm_sequence(p, Tensor(np.zeros((2, 5, 3))), LstmState.zeros(3, 4))


def test_masked_update_is_exact():
    rng = np.random.default_rng(9)
    new = LstmState(Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2))))
    old = LstmState(Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2))))
    out = masked_update(new, old, np.array([True, False, True]))
    assert np.array_equal(out.h.data[[0, 2]], new.h.data[[0, 2]])
    assert np.array_equal(out.h.data[1], old.h.data[1])
    assert np.array_equal(out.c.data[1], old.c.data[1])
