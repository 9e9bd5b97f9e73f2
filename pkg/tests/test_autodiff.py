import numpy as np
import pytest

from arn_enhance.autodiff import AdamState, NonFiniteGradientError, Tape, Tensor, adam_step, backward, ops
from conftest import numeric_grad, rel_err

STEP = 1e-5
TOL = 1e-4


def check_grads(fn, *arrays, weights=None):
    """Compare tape gradients of ``sum(fn(*tensors) * weights)`` with finite differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays])
    if weights is None:
        weights = np.random.default_rng(7).standard_normal(probe.shape)

    def scalar():
        out = fn(*[Tensor(a) for a in arrays])
        return float(np.sum(out.data * weights))

    params = {str(i): Tensor(a, requires_grad=True) for i, a in enumerate(arrays)}
    with Tape() as tape:
        out = fn(*params.values())
        loss = ops.sum(ops.mul(out, Tensor(weights)))
    grads = backward(loss, params, tape)
    for i, a in enumerate(arrays):
        num = numeric_grad(scalar, a, STEP)
        assert rel_err(grads[str(i)], num) < TOL, f"input {i}"


def test_matmul(rng):
    check_grads(ops.matmul, rng.standard_normal((3, 4)), rng.standard_normal((4, 2)))


def test_batched_matmul(rng):
    check_grads(ops.matmul, rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)))
    check_grads(ops.matmul, rng.standard_normal((2, 2, 3, 4)), rng.standard_normal((2, 2, 4, 3)))


@pytest.mark.parametrize("op", [ops.add, ops.sub, ops.mul])
def test_binary(rng, op):
    check_grads(op, rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))


@pytest.mark.parametrize("op", [ops.tanh, ops.sigmoid, ops.exp])
def test_unary(rng, op):
    check_grads(op, rng.standard_normal((4, 5)))


def test_log(rng):
    check_grads(ops.log, rng.uniform(0.5, 2.0, (3, 3)))


def test_abs(rng):
    x = rng.standard_normal((4, 4))
    x[np.abs(x) < 0.1] = 0.5  # keep finite differences away from the kink
    check_grads(ops.abs, x)


def test_scale_and_bias(rng):
    check_grads(lambda x: ops.scale(x, -2.5), rng.standard_normal((3, 2)))
    check_grads(ops.bias_add, rng.standard_normal((2, 3, 4)), rng.standard_normal(4))


def test_softmax(rng):
    check_grads(ops.softmax, rng.standard_normal((3, 5)))


def test_layer_norm(rng):
    check_grads(ops.layer_norm, rng.standard_normal((2, 3, 6)), rng.standard_normal(6), rng.standard_normal(6))


def test_concat_slice_transpose_reshape(rng):
    check_grads(lambda a, b: ops.concat([a, b], axis=1), rng.standard_normal((2, 3)), rng.standard_normal((2, 2)))
    check_grads(lambda a: ops.slice(a, (slice(None), slice(1, 3))), rng.standard_normal((3, 4)))
    check_grads(lambda a: ops.transpose(a, (1, 2, 0)), rng.standard_normal((2, 3, 4)))
    check_grads(lambda a: ops.reshape(a, (6, 2)), rng.standard_normal((3, 4)))


def test_reductions(rng):
    check_grads(lambda a: ops.sum(a, axis=1), rng.standard_normal((3, 4)))
    check_grads(lambda a: ops.mean(a, axis=0), rng.standard_normal((3, 4)))
    check_grads(lambda a: ops.mean(a), rng.standard_normal((3, 4)))


def test_dropout_gradient(rng):
    def fn(a):
        return ops.dropout(a, 0.3, True, np.random.default_rng(3))
    check_grads(fn, rng.standard_normal((4, 6)))


def test_frame_and_overlap_add(rng):
    check_grads(lambda a: ops.frame(a, 5, 2), rng.standard_normal((2, 13)))
    check_grads(lambda a: ops.overlap_add(a, 2, 13), rng.standard_normal((2, 5, 5)))


def test_dft_as_constant_matmul(rng):
    n = 8
    k = np.arange(n // 2 + 1)
    basis = np.cos(2 * np.pi * np.outer(np.arange(n), k) / n)
    check_grads(lambda a: ops.matmul(ops.frame(a, n, 4), Tensor(basis)), rng.standard_normal((1, 20)))


def test_lstm_gradients(rng):
    x = rng.standard_normal((2, 5, 3))
    w_ih = rng.standard_normal((3, 8)) * 0.5
    w_hh = rng.standard_normal((2, 8)) * 0.5
    b = rng.standard_normal(8) * 0.5
    check_grads(ops.lstm, x, w_ih, w_hh, b)
    check_grads(lambda *a: ops.lstm(*a, reverse=True), x, w_ih, w_hh, b)


def composed_lstm(x, w_ih, w_hh, b, reverse=False):
    """LSTM built from primitive ops, one step at a time."""
    nb, nt, _ = x.shape
    hid = w_hh.shape[0]
    h = Tensor(np.zeros((nb, hid)))
    c = Tensor(np.zeros((nb, hid)))
    outs = [None] * nt
    for t in (range(nt - 1, -1, -1) if reverse else range(nt)):
        xt = ops.reshape(ops.slice(x, (slice(None), t)), (nb, x.shape[2]))
        z = ops.bias_add(ops.add(ops.matmul(xt, w_ih), ops.matmul(h, w_hh)), b)
        i = ops.sigmoid(ops.slice(z, (slice(None), slice(0, hid))))
        f = ops.sigmoid(ops.slice(z, (slice(None), slice(hid, 2 * hid))))
        g = ops.tanh(ops.slice(z, (slice(None), slice(2 * hid, 3 * hid))))
        o = ops.sigmoid(ops.slice(z, (slice(None), slice(3 * hid, 4 * hid))))
        c = ops.add(ops.mul(f, c), ops.mul(i, g))
        h = ops.mul(o, ops.tanh(c))
        outs[t] = ops.reshape(h, (nb, 1, hid))
    return ops.concat(outs, axis=1)


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_lstm_matches_composed(rng, reverse):
    arrays = dict(x=rng.standard_normal((2, 6, 4)), w_ih=rng.standard_normal((4, 12)) * 0.4,
                  w_hh=rng.standard_normal((3, 12)) * 0.4, b=rng.standard_normal(12) * 0.4)
    weights = rng.standard_normal((2, 6, 3))
    results = []
    for fn in (ops.lstm, composed_lstm):
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        with Tape() as tape:
            out = fn(*params.values(), reverse=reverse)
            loss = ops.sum(ops.mul(out, Tensor(weights)))
        results.append((out.data, backward(loss, params, tape)))
    (o1, g1), (o2, g2) = results
    assert np.allclose(o1, o2, atol=1e-13)
    for k in arrays:
        assert np.allclose(g1[k], g2[k], atol=1e-12), k


def test_softmax_zero_vector():
    y = ops.softmax(Tensor(np.zeros(5))).data
    assert np.allclose(y, 0.2)


def test_layer_norm_standardizes(rng):
    x = rng.standard_normal((4, 32)) * 3 + 1
    y = ops.layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    assert np.max(np.abs(y.mean(axis=-1))) < 1e-6
    assert np.max(np.abs(y.var(axis=-1) - 1)) < 1e-4  # eps=1e-5 shrinks variance by ~eps/var


def test_layer_norm_unit_variance_large_signal(rng):
    x = rng.standard_normal((4, 64)) * 100
    y = ops.layer_norm(Tensor(x), Tensor(np.ones(64)), Tensor(np.zeros(64))).data
    assert np.max(np.abs(y.var(axis=-1) - 1)) < 1e-6


def test_tanh_derivative_at_zero():
    x = Tensor(np.zeros((1, 1)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.tanh(x))
    assert backward(loss, {"x": x}, tape)["x"][0, 0] == 1.0


def test_abs_subgradient_at_zero():
    x = Tensor(np.array([[0.0, -2.0, 3.0]]), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.abs(x))
    assert backward(loss, {"x": x}, tape)["x"].tolist() == [[0.0, -1.0, 1.0]]


def test_linear_sum_gradient(rng):
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x = rng.standard_normal((4, 2))
    with Tape() as tape:
        loss = ops.sum(ops.matmul(w, Tensor(x)))
    g = backward(loss, {"W": w}, tape)["W"]
    # d/dW_ij sum_k (W x)_ik = sum_k x_jk
    assert np.allclose(g, np.tile(x.sum(axis=1), (3, 1)))


def test_unreached_parameter_gets_zeros(rng):
    a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((3,)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(a)
    grads = backward(loss, {"a": a, "b": b}, tape)
    assert np.all(grads["b"] == 0) and grads["b"].shape == (3,)


def test_non_scalar_loss_rejected(rng):
    a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = ops.tanh(a)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(out)


def test_errors():
    with pytest.raises(ValueError, match="shape"):
        ops.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError, match="shape"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError, match="non-positive"):
        ops.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        ops.exp(Tensor(np.array([1e4])))


def test_dropout_identity_cases(rng):
    x = Tensor(rng.standard_normal((3, 3)))
    assert ops.dropout(x, 0.5, False) is x
    assert ops.dropout(x, 0.0, True, rng) is x


def test_no_recording_outside_tape(rng):
    a = Tensor(rng.standard_normal(3), requires_grad=True)
    assert not ops.tanh(a).requires_grad


def test_tape_determinism(rng):
    x = rng.standard_normal((2, 4, 3))
    w = rng.standard_normal((3, 8))
    outs = []
    for _ in range(2):
        p = Tensor(w.copy(), requires_grad=True)
        with Tape() as tape:
            y = ops.lstm(Tensor(x), p, Tensor(np.ones((2, 8)) * 0.1), Tensor(np.zeros(8)))
            loss = ops.sum(ops.dropout(y, 0.2, True, np.random.default_rng(5)))
        outs.append((y.data.tobytes(), backward(loss, {"w": p}, tape)["w"].tobytes()))
    assert outs[0] == outs[1]


def test_adam_first_step_magnitude():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -3.0, 1e-3])}
    adam_step(p, g, AdamState(), lr=0.01)
    expect = np.array([1.0, -2.0, 3.0]) - 0.01 * np.sign(g["w"]) * np.abs(g["w"]) / (np.abs(g["w"]) + 1e-8)
    assert np.allclose(p["w"], expect, rtol=0, atol=1e-15)


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, 2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert p["w"].tolist() == [1.0, 2.0]


def test_adam_two_steps_on_quadratic():
    # f(x) = (x - 3)^2, hand-rolled recurrence
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x = np.array([0.0])
    p = {"x": x}
    state = AdamState()
    xs, m, v = 0.0, 0.0, 0.0
    for t in (1, 2):
        g = 2 * (xs - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        xs -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        adam_step(p, {"x": 2 * (p["x"] - 3.0)}, state, lr, b1, b2, eps)
    assert p["x"][0] == pytest.approx(xs, abs=1e-15)
    # by hand: g = -6, -5.8; m_hat = -1.12/0.19, v_hat = 0.069604/0.001999
    assert xs == pytest.approx(0.1 + 0.1 * (1.12 / 0.19) / np.sqrt(0.069604 / 0.001999), abs=1e-9)


def test_adam_rejects_non_finite():
    p = {"w": np.array([1.0])}
    state = AdamState()
    with pytest.raises(NonFiniteGradientError):
        adam_step(p, {"w": np.array([np.nan])}, state, lr=0.1)
    assert p["w"][0] == 1.0 and state.step == 0


def test_adam_clipping():
    p = {"w": np.zeros(2)}
    state = AdamState()
    adam_step(p, {"w": np.array([30.0, 40.0])}, state, lr=1.0, clip_norm=5.0)
    assert np.allclose(state.m["w"], 0.1 * np.array([3.0, 4.0]))
