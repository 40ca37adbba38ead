"""Parameterized layers and their closed-form parameter counts."""

from __future__ import annotations

import math

import numpy as np

from .conv import conv, conv_transpose
from .tensor import Tensor, concat, default_dtype, linear


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


def param_count(kind: str, **hp) -> int:
    """Number of stored scalars for one layer of ``kind`` with hyperparameters ``hp``."""
    if kind == "dense":
        return hp["n_in"] * hp["n_out"] + hp["n_out"]
    if kind in ("conv2d", "conv3d", "deconv2d", "deconv3d"):
        return hp["c_out"] * hp["c_in"] * math.prod(hp["kernel"]) + hp["c_out"]
    if kind == "rnn_cell":
        return (hp["n_in"] + hp["n_hidden"]) * hp["n_hidden"] + hp["n_hidden"]
    if kind == "lstm_cell":
        return 4 * ((hp["n_in"] + hp["n_hidden"]) * hp["n_hidden"] + hp["n_hidden"])
    if kind == "conv_lstm_cell":
        k = math.prod(hp["kernel"])
        return 4 * hp["c_hidden"] * (hp["c_in"] + hp["c_hidden"]) * k + 4 * hp["c_hidden"]
    if kind == "stc_gate":
        c, k = hp["channels"], math.prod(hp["kernel"])
        return (2 * c * c + c) + c * c * k
    raise ValueError(f"unknown layer kind {kind!r}")


class Layer:
    kind: str = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def hparams(self) -> dict:
        raise NotImplementedError

    def n_stored(self) -> int:
        return sum(p.size for p in self.params.values())

    def closed_form_count(self) -> int:
        return param_count(self.kind, **self.hparams)

    def config(self) -> dict:
        return {"kind": self.kind, **self.hparams}

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hparams.items())
        return f"{type(self).__name__}({hp})"


def dense_forward(x: Tensor, params: dict) -> Tensor:
    return linear(x, params["weight"], params.get("bias"))


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self._param("weight", glorot_uniform((n_out, n_in), n_in, n_out, rng))
        self.bias = self._param("bias", np.zeros(n_out, default_dtype()))

    @property
    def hparams(self):
        return {"n_in": self.n_in, "n_out": self.n_out}

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(x, self.params)


class Conv(Layer):
    """2-D or 3-D cross-correlation layer (``kind`` is ``conv2d``/``conv3d``)."""

    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1, padding=0, ndim: int = 2, bias=True):
        super().__init__()
        self.kind = f"conv{ndim}d"
        self.ndim = ndim
        self.c_in, self.c_out = c_in, c_out
        self.kernel = (kernel,) * ndim if isinstance(kernel, int) else tuple(kernel)
        self.stride = (stride,) * ndim if isinstance(stride, int) else tuple(stride)
        self.padding = (padding,) * ndim if isinstance(padding, int) else tuple(padding)
        k = math.prod(self.kernel)
        self.weight = self._param("weight", glorot_uniform((c_out, c_in) + self.kernel, c_in * k, c_out * k, rng))
        self.bias = self._param("bias", np.zeros(c_out, default_dtype())) if bias else None

    @property
    def hparams(self):
        return {
            "c_in": self.c_in,
            "c_out": self.c_out,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
        }

    def closed_form_count(self) -> int:
        n = param_count(self.kind, **self.hparams)
        return n if self.bias is not None else n - self.c_out

    def __call__(self, x: Tensor) -> Tensor:
        return conv(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose(Layer):
    def __init__(
        self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1, padding=0, output_padding=0, ndim: int = 2
    ):
        super().__init__()
        self.kind = f"deconv{ndim}d"
        self.ndim = ndim
        self.c_in, self.c_out = c_in, c_out
        as_t = lambda v: (v,) * ndim if isinstance(v, int) else tuple(v)  # noqa: E731
        self.kernel, self.stride = as_t(kernel), as_t(stride)
        self.padding, self.output_padding = as_t(padding), as_t(output_padding)
        k = math.prod(self.kernel)
        self.weight = self._param("weight", glorot_uniform((c_in, c_out) + self.kernel, c_in * k, c_out * k, rng))
        self.bias = self._param("bias", np.zeros(c_out, default_dtype()))

    @property
    def hparams(self):
        return {
            "c_in": self.c_in,
            "c_out": self.c_out,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
            "output_padding": list(self.output_padding),
        }

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


def rnn_cell_step(x_t: Tensor, h_prev: Tensor, params: dict) -> Tensor:
    """``tanh(W_x x + W_h h + b)`` on (batch, features) rows."""
    return (linear(x_t, params["w_x"], params["bias"]) + linear(h_prev, params["w_h"])).tanh()


def lstm_cell_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """One LSTM step; the stacked gate rows are ordered input, forget, modulation, output."""
    z = linear(x_t, params["w_x"], params["bias"]) + linear(h_prev, params["w_h"])
    n = h_prev.shape[1]
    i, f, g, o = z[:, :n].sigmoid(), z[:, n : 2 * n].sigmoid(), z[:, 2 * n : 3 * n].tanh(), z[:, 3 * n :].sigmoid()
    c = f * c_prev + i * g
    return o * c.tanh(), c


class RNNCell(Layer):
    kind = "rnn_cell"

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_hidden = n_in, n_hidden
        self._param("w_x", glorot_uniform((n_hidden, n_in), n_in, n_hidden, rng))
        self._param("w_h", glorot_uniform((n_hidden, n_hidden), n_hidden, n_hidden, rng))
        self._param("bias", np.zeros(n_hidden, default_dtype()))

    @property
    def hparams(self):
        return {"n_in": self.n_in, "n_hidden": self.n_hidden}

    def __call__(self, x_t: Tensor, h_prev: Tensor) -> Tensor:
        return rnn_cell_step(x_t, h_prev, self.params)


class LSTMCell(Layer):
    kind = "lstm_cell"

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_hidden = n_in, n_hidden
        self._param("w_x", glorot_uniform((4 * n_hidden, n_in), n_in, 4 * n_hidden, rng))
        self._param("w_h", glorot_uniform((4 * n_hidden, n_hidden), n_hidden, 4 * n_hidden, rng))
        self._param("bias", np.zeros(4 * n_hidden, default_dtype()))

    @property
    def hparams(self):
        return {"n_in": self.n_in, "n_hidden": self.n_hidden}

    def __call__(self, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_cell_step(x_t, h_prev, c_prev, self.params)


def conv_lstm_cell_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params: dict, padding: int) -> tuple[Tensor, Tensor]:
    """LSTM gates computed by one convolution over the channel-stacked ``[x, h]``."""
    z = conv(concat([x_t, h_prev], axis=1), params["weight"], params["bias"], 1, padding)
    n = h_prev.shape[1]
    i, f = z[:, :n].sigmoid(), z[:, n : 2 * n].sigmoid()
    g, o = z[:, 2 * n : 3 * n].tanh(), z[:, 3 * n :].sigmoid()
    c = f * c_prev + i * g
    return o * c.tanh(), c


class ConvLSTMCell(Layer):
    kind = "conv_lstm_cell"

    def __init__(self, c_in: int, c_hidden: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        self.c_in, self.c_hidden, self.kernel = c_in, c_hidden, kernel
        k2 = kernel * kernel
        shape = (4 * c_hidden, c_in + c_hidden, kernel, kernel)
        self._param("weight", glorot_uniform(shape, (c_in + c_hidden) * k2, 4 * c_hidden * k2, rng))
        self._param("bias", np.zeros(4 * c_hidden, default_dtype()))

    @property
    def hparams(self):
        return {"c_in": self.c_in, "c_hidden": self.c_hidden, "kernel": [self.kernel, self.kernel]}

    def __call__(self, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        return conv_lstm_cell_step(x_t, h_prev, c_prev, self.params, self.kernel // 2)
