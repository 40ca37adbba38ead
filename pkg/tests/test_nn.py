import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microevo.nn.checkpoint import load_params, save_params
from microevo.nn.conv import conv, conv_transpose
from microevo.nn.gradcheck import check_gradients, numeric_grad, relative_error
from microevo.nn.layers import (
    Conv,
    ConvLSTMCell,
    ConvTranspose,
    Dense,
    LSTMCell,
    RNNCell,
    dense_forward,
    glorot_uniform,
    lstm_cell_step,
    param_count,
    rnn_cell_step,
)
from microevo.nn.optim import Adam, AdamState, adam_update
from microevo.nn.tensor import Tensor, activation, concat, linear, mse_loss, no_grad, precision, stack
from microevo.field import ChecksumError


def _t(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def _naive_conv2d(x, w, b, stride, pad):
    """Direct quadruple loop, the oracle for the vectorized kernels."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, ho, wo))
    for n in range(B):
        for o in range(O):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * w[o]) + (b[o] if b is not None else 0)
    return out


# -- tensor basics ---------------------------------------------------------------


def test_dense_examples():
    x = _t([[1.0, 1.0]])
    w = _t([[1.0, 2.0], [3.0, 4.0]])
    b = _t([0.0, 1.0])
    np.testing.assert_array_equal(dense_forward(x, {"weight": w, "bias": b}).data, [[3, 8]])
    eye = _t(np.eye(3))
    xs = _t(np.random.default_rng(0).normal(size=(4, 3)))
    np.testing.assert_array_equal(linear(xs, eye).data, xs.data)


def test_dense_backward_is_transpose():
    rng = np.random.default_rng(1)
    w = _t(rng.normal(size=(3, 4)))
    x = _t(rng.normal(size=(1, 4)))
    up = rng.normal(size=(1, 3))
    linear(x, w).backward(up)
    np.testing.assert_allclose(x.grad, up @ w.data, rtol=1e-14)


def test_linear_shape_errors():
    with pytest.raises(ValueError):
        linear(_t(np.zeros((2, 3))), _t(np.zeros((4, 2))))
    with pytest.raises(ValueError):
        mse_loss(_t(np.zeros(3)), np.zeros(4))


def test_activation_values():
    z = _t([0.0, -1.0])
    assert activation(z, "sigmoid").data[0] == 0.5
    assert activation(z, "tanh").data[0] == 0.0
    assert activation(z, "relu").data[1] == 0.0
    with pytest.raises(ValueError):
        activation(z, "gelu")


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "relu"])
def test_activation_gradients(kind):
    rng = np.random.default_rng(2)
    data = rng.normal(size=16)
    data[np.abs(data) < 1e-3] = 0.5  # keep relu away from its kink
    x = _t(data)
    (err,) = check_gradients(lambda: (activation(x, kind) * _t(np.arange(16.0), False)).sum(), [x])
    assert err < 1e-6


def test_mse_examples():
    assert float(mse_loss(_t([1.0, 2.0]), [1.0, 2.0]).data) == 0.0
    assert float(mse_loss(_t([0.0, 0.0]), [1.0, 1.0]).data) == 1.0
    p = _t([0.5, -1.0, 2.0])
    t = np.array([0.0, 1.0, 1.0])
    mse_loss(p, t).backward()
    np.testing.assert_allclose(p.grad, 2 * (p.data - t) / 3, rtol=1e-15)
    (err,) = check_gradients(lambda: mse_loss(p, t), [p])
    assert err < 1e-8


def test_broadcast_and_shape_op_gradients():
    rng = np.random.default_rng(3)
    a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(4,)))
    c = _t(rng.normal(size=(3, 1)) + 3)

    def f():
        y = (a * b + c) / c - b ** 2
        y = concat([y, y.T.T[:, :2]], axis=1).reshape(2, 9)
        return (stack([y, y * 2], axis=0)[1].sum(axis=0) * _t(np.arange(9.0), False)).mean() + a.exp().sum()

    assert max(check_gradients(f, [a, b, c])) < 1e-6


def test_fancy_index_gradient_accumulates():
    x = _t(np.arange(4.0))
    x[[0, 0, 2]].sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 0, 1, 0])


def test_no_grad_records_nothing():
    x = _t([1.0, 2.0])
    with no_grad():
        y = x * 2
    assert not y.requires_grad and y._parents == ()


def test_only_leaves_keep_grad():
    x = _t([1.0, 2.0])
    y = x * 3
    (y * y).sum().backward()
    assert y.grad is None
    np.testing.assert_array_equal(x.grad, 18 * x.data)


def test_numeric_grad_of_known_function():
    x = _t([1.0, 2.0, 3.0])
    np.testing.assert_allclose(numeric_grad(lambda: (x * x).sum(), x), 2 * x.data, rtol=1e-9)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


# -- convolution -------------------------------------------------------------------


def test_conv_examples():
    x = _t(np.random.default_rng(0).normal(size=(2, 3, 5, 6)))
    ident = np.zeros((3, 3, 1, 1))
    ident[range(3), range(3)] = 1
    assert np.array_equal(conv(x, _t(ident)).data, x.data)
    ones = conv(_t(np.ones((1, 1, 3, 3))), _t(np.ones((1, 1, 3, 3))))
    assert ones.shape == (1, 1, 1, 1) and ones.data.item() == 9.0


def test_identity_3x3_kernel_same_padding_is_exact():
    k = np.zeros((2, 2, 3, 3))
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1
    x = _t(np.random.default_rng(9).normal(size=(1, 2, 7, 4)))
    assert np.array_equal(conv(x, _t(k), None, 1, 1).data, x.data)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w, b = rng.normal(size=(2, 3, 8, 7)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    with precision(np.float64):
        got = conv(_t(x), _t(w), _t(b), stride, pad).data
    np.testing.assert_allclose(got, _naive_conv2d(x, w, b, stride, pad), atol=1e-12)


@given(st.integers(1, 2), st.integers(0, 2), st.integers(1, 3), st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_conv_adjoint_identity(stride, pad, k, seed):
    pad = min(pad, k - 1)
    rng = np.random.default_rng(seed)
    for nd in (2, 3):
        sp = (6, 5) if nd == 2 else (4, 5, 3)
        x = rng.normal(size=(2, 3) + sp)
        w = rng.normal(size=(4, 3) + (k,) * nd)
        with precision(np.float64):
            y = conv(_t(x), _t(w), None, stride, pad).data
            r = rng.normal(size=y.shape)
            full = tuple((o - 1) * stride - 2 * pad + k for o in y.shape[2:])
            op = tuple(s - f for s, f in zip(sp, full))
            if any(o >= stride or o < 0 for o in op):
                continue
            xt = conv_transpose(_t(r), _t(w), None, stride, pad, op).data
        assert xt.shape == x.shape
        assert abs(np.vdot(y, r) - np.vdot(x, xt)) <= 1e-9 * max(1.0, abs(np.vdot(y, r)))


def test_conv_errors():
    with pytest.raises(ValueError):
        conv(_t(np.zeros((1, 2, 4, 4))), _t(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        conv(_t(np.zeros((1, 1, 2, 2))), _t(np.zeros((1, 1, 3, 3))))


# -- layers and gradient checks ---------------------------------------------------


def _grad_check_layer(build, inputs, seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        layer = build(rng)
        xs = [_t(rng.normal(size=s)) for s in inputs]
        weights = _t(rng.normal(size=layer(*xs).shape) if not isinstance(layer(*xs), tuple) else 0, False)

        def f():
            out = layer(*xs)
            if isinstance(out, tuple):
                return sum(((o * o).sum() for o in out), _t(0.0, False)) + out[0].sum()
            return (out * weights).sum()

        return max(check_gradients(f, xs + layer.parameters()))


@pytest.mark.parametrize(
    "name,build,inputs",
    [
        ("dense", lambda r: Dense(4, 3, r), [(2, 4)]),
        ("conv2d", lambda r: Conv(2, 3, 3, r, stride=2, padding=1), [(2, 2, 5, 6)]),
        ("conv3d", lambda r: Conv(2, 2, 3, r, stride=(1, 2, 2), padding=1, ndim=3), [(1, 2, 3, 4, 5)]),
        ("deconv2d", lambda r: ConvTranspose(3, 2, 3, r, stride=2, padding=1, output_padding=1), [(2, 3, 3, 4)]),
        ("deconv3d", lambda r: ConvTranspose(2, 2, 3, r, stride=(1, 2, 2), padding=1, output_padding=(0, 1, 0), ndim=3), [(1, 2, 2, 3, 3)]),
        ("rnn_cell", lambda r: RNNCell(3, 4, r), [(2, 3), (2, 4)]),
        ("lstm_cell", lambda r: LSTMCell(3, 4, r), [(2, 3), (2, 4), (2, 4)]),
        ("conv_lstm_cell", lambda r: ConvLSTMCell(2, 3, 3, r), [(1, 2, 4, 5), (1, 3, 4, 5), (1, 3, 4, 5)]),
    ],
)
def test_layer_gradients(name, build, inputs):
    for seed in range(3):
        assert _grad_check_layer(build, inputs, seed) < 1e-6, name


def test_rnn_cell_examples():
    z = {"w_x": _t(np.zeros((2, 3))), "w_h": _t(np.zeros((2, 2))), "bias": _t([0.3, -0.7])}
    h = rnn_cell_step(_t(np.zeros((1, 3))), _t(np.zeros((1, 2))), z)
    np.testing.assert_allclose(h.data, np.tanh([[0.3, -0.7]]), rtol=1e-15)
    s = {"w_x": _t([[1.0]]), "w_h": _t([[0.0]]), "bias": _t([0.0])}
    assert rnn_cell_step(_t([[0.5]]), _t([[0.0]]), s).data.item() == pytest.approx(0.46212, abs=1e-5)


def test_lstm_zero_parameters():
    n_in, n = 3, 4
    params = {"w_x": _t(np.zeros((4 * n, n_in))), "w_h": _t(np.zeros((4 * n, n))), "bias": _t(np.zeros(4 * n))}
    c_prev = _t(np.random.default_rng(0).normal(size=(2, n)))
    h, c = lstm_cell_step(_t(np.ones((2, n_in))), _t(np.ones((2, n))), c_prev, params)
    np.testing.assert_allclose(c.data, 0.5 * c_prev.data, rtol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c_prev.data), rtol=1e-15)
    h0, _ = lstm_cell_step(_t(np.ones((2, n_in))), _t(np.ones((2, n))), _t(np.zeros((2, n))), params)
    assert not h0.data.any()


@pytest.mark.parametrize(
    "layer",
    [
        lambda r: Dense(7, 5, r),
        lambda r: Conv(3, 4, 3, r),
        lambda r: Conv(2, 5, (3, 3, 3), r, ndim=3),
        lambda r: ConvTranspose(4, 2, 3, r),
        lambda r: ConvTranspose(4, 2, (3, 2, 3), r, ndim=3),
        lambda r: RNNCell(6, 5, r),
        lambda r: LSTMCell(6, 5, r),
        lambda r: ConvLSTMCell(3, 4, 3, r),
    ],
)
def test_param_count_matches_storage(layer):
    lay = layer(np.random.default_rng(0))
    assert lay.closed_form_count() == lay.n_stored() == sum(p.size for p in lay.parameters())


def test_lstm_param_count_formula():
    assert param_count("lstm_cell", n_in=10, n_hidden=7) == 4 * ((10 + 7) * 7 + 7)
    assert param_count("lstm_cell", n_in=10, n_hidden=7) == 4 * param_count("rnn_cell", n_in=10, n_hidden=7)
    with pytest.raises(ValueError):
        param_count("attention")


def test_glorot_bounds_and_seeding():
    a = glorot_uniform((200, 300), 300, 200, np.random.default_rng(0))
    b = glorot_uniform((200, 300), 300, 200, np.random.default_rng(0))
    assert np.array_equal(a, b)
    bound = math.sqrt(6 / 500)
    assert np.abs(a).max() <= bound
    assert np.var(a) == pytest.approx(bound**2 / 3, rel=0.02)


# -- optimizer --------------------------------------------------------------------


def test_adam_first_step_is_sign_sized():
    p = _t([1.0, -2.0, 3.0])
    st = AdamState.init([p])
    g = np.array([0.5, -3.0, 1e-2])
    adam_update([p], [g], st)
    np.testing.assert_allclose(p.data, [1.0, -2.0, 3.0] - 1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_zero_gradient_leaves_params():
    p = _t([1.0, 2.0])
    st = AdamState.init([p])
    adam_update([p], [None], st)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_errors():
    p = _t([1.0])
    with pytest.raises(RuntimeError):
        adam_update([p], [np.ones(1)], AdamState())
    with pytest.raises(ValueError):
        adam_update([_t([1.0, 2.0])], [np.ones(2)], AdamState.init([p]))


def test_adam_trajectories_identical():
    def run():
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        x = rng.normal(size=(8, 2))
        y = rng.normal(size=(8, 3))
        opt = Adam([w])
        for _ in range(100):
            opt.zero_grad()
            mse_loss(linear(Tensor(x), w), y).backward()
            opt.step()
        return w.data

    assert np.array_equal(run(), run())


def test_adam_descends_quadratic():
    w = _t([5.0, -3.0])
    opt = Adam([w], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
    assert np.abs(w.data).max() < 0.05


# -- checkpoints --------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    named = {"a.weight": rng.normal(size=(2, 3)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
    save_params(named, tmp_path / "ck", {"note": "x"})
    back, manifest = load_params(tmp_path / "ck")
    assert manifest["meta"] == {"note": "x"} and manifest["n_params"] == 11
    for k in named:
        assert np.array_equal(back[k], named[k])
    raw = (tmp_path / "ck" / "params.bin").read_bytes()
    (tmp_path / "ck" / "params.bin").write_bytes(raw[:-3])
    with pytest.raises(ChecksumError):
        load_params(tmp_path / "ck")
