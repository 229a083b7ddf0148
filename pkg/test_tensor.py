"""
Tests for the tensor module: primitives, the gradient tape and Adam
"""

import numpy as np
import pytest

from conftest import relative_error
from modules.error_handler import ShapeError, TapeError
from modules.tensor import (
    AdamState,
    Tape,
    Tensor,
    abs_,
    adam_step,
    add,
    conv1d,
    conv1d_transpose,
    get_dtype,
    glu,
    matvec,
    mean,
    mul,
    pad_time,
    precision,
    relu,
    sigmoid,
    sum_,
    take_row,
    trim_time,
)


def naive_conv1d(x, w, b, stride):
    c_out, c_in, k = w.shape
    out_len = (x.shape[1] - k) // stride + 1
    out = np.zeros((c_out, out_len))
    for o in range(c_out):
        for t in range(out_len):
            for c in range(c_in):
                for tap in range(k):
                    out[o, t] += w[o, c, tap] * x[c, t * stride + tap]
            out[o, t] += b[o]
    return out


def test_conv1d_identity_kernel():
    out = conv1d(Tensor([[1.0, 2.0, 3.0]]), Tensor([[[1.0]]]), Tensor([0.0]), 1)
    np.testing.assert_allclose(out.data, [[1.0, 2.0, 3.0]])


def test_conv1d_strided_window_sum():
    out = conv1d(Tensor([[1.0, 2.0, 3.0, 4.0]]), Tensor([[[1.0, 1.0]]]), Tensor([0.0]), 2)
    np.testing.assert_allclose(out.data, [[3.0, 7.0]])


def test_conv1d_matches_naive_loop(rng):
    x = rng.normal(size=(2, 32))
    w = rng.normal(size=(3, 2, 8))
    b = rng.normal(size=3)
    with precision(np.float64):
        out = conv1d(Tensor(x), Tensor(w), Tensor(b), 4)
    assert out.shape == (3, 7)
    assert relative_error(out.data, naive_conv1d(x, w, b, 4)) <= 1e-6


def test_conv1d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        conv1d(Tensor(np.ones((2, 8))), Tensor(np.ones((1, 3, 2))), None, 1)


def test_conv1d_transpose_single_tap_spread():
    out = conv1d_transpose(Tensor([[1.0]]), Tensor([[[1.0, 1.0]]]), None, 1)
    np.testing.assert_allclose(out.data, [[1.0, 1.0]])


def test_conv1d_transpose_zero_input_gives_bias(rng):
    bias = np.array([0.5, -1.0])
    out = conv1d_transpose(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(3, 2, 8))), Tensor(bias), 4)
    assert out.shape == (2, (4 - 1) * 4 + 8)
    np.testing.assert_allclose(out.data, np.broadcast_to(bias[:, None], out.shape))


def test_conv_adjoint_identity(rng):
    with precision(np.float64):
        x = Tensor(rng.normal(size=(2, 16)))
        w = Tensor(rng.normal(size=(3, 2, 8)))
        y = conv1d(x, w, None, 4)
        upstream = Tensor(rng.normal(size=y.shape))
        back = conv1d_transpose(upstream, w, None, 4)
    assert back.shape == x.shape
    lhs = float(np.sum(y.data * upstream.data))
    rhs = float(np.sum(x.data * back.data))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_glu_values():
    out = glu(Tensor([[1.0], [2.0], [0.0], [0.0]]))
    np.testing.assert_allclose(out.data, [[0.5], [1.0]])


def test_glu_saturated_gate_passes_first_half():
    with precision(np.float64):
        out = glu(Tensor([[1.5], [-2.0], [50.0], [50.0]]))
    np.testing.assert_allclose(out.data, [[1.5], [-2.0]], rtol=1e-12)


def test_glu_rejects_odd_channels():
    with pytest.raises(ShapeError):
        glu(Tensor(np.ones((3, 2))))


def test_square_gradient():
    with precision(np.float64):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_(mul(x, x))
            tape.backward(loss)
    np.testing.assert_allclose(tape.grad(x), [6.0])


def test_dead_relu_gradient():
    x = Tensor([-1.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(sum_(relu(x)))
    np.testing.assert_allclose(tape.grad(x), [0.0])


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = mul(x, 2.0)
        with pytest.raises(TapeError):
            tape.backward(y)


def test_backward_twice_requires_reset():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = sum_(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)
        tape.reset()
        tape.backward(sum_(x))
    np.testing.assert_allclose(tape.grad(x), np.ones(3))


def test_loss_off_tape_is_rejected():
    with Tape() as tape:
        with pytest.raises(TapeError):
            tape.backward(Tensor(1.0))


def test_elementwise_gradients(rng, gradient_check):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    errors = gradient_check(lambda t: sum_(mul(add(t[0], t[1]), sigmoid(t[0]))), [a, b])
    assert max(errors) <= 1e-4


def test_abs_and_mean_gradient(rng, gradient_check):
    x = rng.normal(size=(2, 5)) + 0.1
    x[np.abs(x) < 0.05] = 0.3
    assert max(gradient_check(lambda t: mean(abs_(t[0])), [x])) <= 1e-4


def test_glu_gradient(rng, gradient_check):
    x = rng.normal(size=(4, 8))
    upstream = rng.normal(size=(2, 8))
    assert max(gradient_check(lambda t: sum_(mul(glu(t[0]), upstream)), [x])) <= 1e-6


def test_conv_gradients(rng, gradient_check):
    x = rng.normal(size=(2, 20))
    w = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=3)
    w_t = rng.normal(size=(3, 2, 4))

    def build(t):
        y = conv1d(t[0], t[1], t[2], 2)
        z = conv1d_transpose(relu(y), t[3], None, 2)
        return mean(mul(z, z))

    assert max(gradient_check(build, [x, w, b, w_t])) <= 1e-4


def test_shape_primitive_gradients(rng, gradient_check):
    h = rng.normal(size=(2, 3))
    w = rng.normal(size=(4, 3))
    x = rng.normal(size=(1, 5))

    def build(t):
        v = matvec(t[1], take_row(t[0], 1))
        padded = pad_time(t[2], 9)
        trimmed = trim_time(padded, 6)
        return add(sum_(mul(v, v)), sum_(mul(trimmed, trimmed)))

    assert max(gradient_check(build, [h, w, x])) <= 1e-4


def test_default_precision_is_float32():
    assert get_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_adam_zero_gradient_keeps_params():
    param = Tensor(np.array([0.25, -0.5]), requires_grad=True)
    state = AdamState()
    adam_step({"p": param}, {"p": np.zeros(2, dtype=np.float32)}, state)
    np.testing.assert_allclose(param.data, [0.25, -0.5])
    np.testing.assert_allclose(state.m["p"], 0.0)
    np.testing.assert_allclose(state.v["p"], 0.0)
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    with precision(np.float64):
        param = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState(lr=1e-3)
        adam_step({"p": param}, {"p": np.array([1.0])}, state)
    assert param.data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_constant_gradient_is_monotone():
    with precision(np.float64):
        param = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState(lr=1e-2)
        adam_step({"p": param}, {"p": np.array([2.0])}, state)
        first = param.data[0]
        adam_step({"p": param}, {"p": np.array([2.0])}, state)
    assert 0.0 > first > param.data[0]
    assert state.step == 2


def test_adam_rejects_shape_mismatch():
    param = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step({"p": param}, {"p": np.zeros(2)}, AdamState())


def test_adam_failed_step_leaves_state_untouched():
    first = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    second = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState(lr=0.1)
    before = first.data.copy()
    with pytest.raises(ShapeError):
        adam_step({"a": first, "b": second}, {"a": np.ones(2), "b": np.ones(4)}, state)
    assert state.step == 0
    assert state.m == {} and state.v == {}
    np.testing.assert_array_equal(first.data, before)
