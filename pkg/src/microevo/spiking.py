"""Leaky integrate-and-fire dynamics with a rectangular surrogate gradient.

Membrane update with hard reset::

    u_t = decay * u_{t-1} * (1 - o_{t-1}) + I_t
    o_t = H(u_t - u_th)            H(0) = 1

The backward pass replaces dH/du by ``1/width`` inside ``|u - u_th| <= width/2``.
In ``"ramp"`` forward mode the spike is the clipped ramp whose derivative is
exactly that surrogate; gradient checks run in this mode so that finite
differences see the same function the backward pass differentiates.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .nn.conv import conv
from .nn.layers import Layer, glorot_uniform
from .nn.tensor import Tensor, concat, default_dtype

STC_CALIBRATION = 2.0

_mode = {"forward": "step"}


@contextlib.contextmanager
def spike_forward(mode: str):
    """Switch the spike nonlinearity between ``"step"`` (default) and ``"ramp"``."""
    if mode not in ("step", "ramp"):
        raise ValueError("mode must be 'step' or 'ramp'")
    old = _mode["forward"]
    _mode["forward"] = mode
    try:
        yield
    finally:
        _mode["forward"] = old


class NonBinarySpikeError(ValueError):
    pass


@dataclass(frozen=True)
class LifParams:
    decay: float = 0.5
    u_th: float = 1.0
    surrogate_width: float = 1.0

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.u_th <= 0 or self.surrogate_width <= 0:
            raise ValueError("threshold and surrogate width must be positive")


@dataclass(frozen=True)
class LifState:
    u: Tensor
    o: Tensor

    @classmethod
    def zeros(cls, shape) -> "LifState":
        z = np.zeros(shape, default_dtype())
        return cls(Tensor(z), Tensor(z.copy()))


def surrogate_spike_grad(u_minus_th, p: LifParams = LifParams()) -> np.ndarray:
    x = np.asarray(u_minus_th.data if isinstance(u_minus_th, Tensor) else u_minus_th)
    half = p.surrogate_width / 2
    return np.where(np.abs(x) <= half, 1.0 / p.surrogate_width, 0.0).astype(x.dtype if x.dtype.kind == "f" else default_dtype())


def spike(u: Tensor, p: LifParams = LifParams()) -> Tensor:
    x = u.data - p.u_th
    if _mode["forward"] == "step":
        out = (x >= 0).astype(u.data.dtype)
    else:
        out = np.clip(x / p.surrogate_width + 0.5, 0.0, 1.0).astype(u.data.dtype)
    sg = surrogate_spike_grad(x, p)
    return Tensor._make(out, (u,), lambda g: (g * sg,))


def _check_binary(o: Tensor) -> None:
    if _mode["forward"] == "step" and not np.all((o.data == 0) | (o.data == 1)):
        raise NonBinarySpikeError("previous spikes must be exactly 0 or 1")


def lif_step(state: LifState, input_current: Tensor, p: LifParams = LifParams()) -> LifState:
    if state.u.shape != input_current.shape or state.o.shape != state.u.shape:
        raise ValueError(f"LIF shapes disagree: u {state.u.shape}, o {state.o.shape}, input {input_current.shape}")
    _check_binary(state.o)
    u = p.decay * state.u * (1 - state.o) + input_current
    return LifState(u, spike(u, p))


class StcGates(Layer):
    """Learnable self-connections of one spiking feature map with ``channels`` maps.

    ``w_t``/``b_t``: 1x1 convolution of ``[u_prev, o_prev]`` whose sigmoid,
    times :data:`STC_CALIBRATION`, scales the leak. ``w_s``: ``kernel x kernel``
    convolution of the previous spike map added to the input current.
    """

    kind = "stc_gate"

    def __init__(self, channels: int, kernel: int, rng: np.random.Generator | None = None, zero: bool = False):
        super().__init__()
        self.channels, self.kernel = channels, kernel
        c, k = channels, kernel
        dt = default_dtype()
        if zero or rng is None:
            w_t, w_s = np.zeros((c, 2 * c, 1, 1), dt), np.zeros((c, c, k, k), dt)
        else:
            w_t = glorot_uniform((c, 2 * c, 1, 1), 2 * c, c, rng)
            w_s = glorot_uniform((c, c, k, k), c * k * k, c * k * k, rng)
        self._param("w_t", w_t)
        self._param("b_t", np.zeros(c, dt))
        self._param("w_s", w_s)

    @property
    def hparams(self):
        return {"channels": self.channels, "kernel": [self.kernel, self.kernel]}


def stc_lif_step(state: LifState, input_current: Tensor, gates: StcGates | dict, p: LifParams = LifParams()) -> LifState:
    """LIF step with a gated leak and a spatial self-connection of the previous spikes.

    With all gate parameters zero the gate is ``2 * sigmoid(0) = 1`` and the
    self-connection adds ``0``, so the result equals :func:`lif_step` bit for bit.
    """
    g = gates.params if isinstance(gates, StcGates) else gates
    u_prev, o_prev = state.u, state.o
    if u_prev.ndim != 4 or u_prev.shape != input_current.shape or o_prev.shape != u_prev.shape:
        raise ValueError("stc_lif_step expects matching (B, C, H, W) state and input")
    c = u_prev.shape[1]
    if g["w_t"].shape[:2] != (c, 2 * c) or g["w_s"].shape[:2] != (c, c):
        raise ValueError(f"gate parameters do not fit a {c}-channel feature map")
    _check_binary(o_prev)
    gate = conv(concat([u_prev, o_prev], axis=1), g["w_t"], g["b_t"]).sigmoid()
    k = g["w_s"].shape[-1]
    recur = conv(o_prev, g["w_s"], None, 1, k // 2)
    leak = (p.decay * (STC_CALIBRATION * gate)) * u_prev
    u = leak * (1 - o_prev) + input_current + recur
    return LifState(u, spike(u, p))

