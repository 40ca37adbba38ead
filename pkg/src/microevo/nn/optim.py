"""Adam with bias correction, kept as an explicit state object."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None
    step: int = 0
    shapes: list[tuple] = field(default_factory=list)

    @classmethod
    def init(cls, params, **hyper) -> "AdamState":
        params = list(params)
        st = cls(**hyper)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        st.shapes = [p.shape for p in params]
        return st


def adam_update(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState) -> None:
    """Apply one Adam step in place. A ``None`` gradient counts as zero."""
    if state.m is None or state.v is None:
        raise RuntimeError("Adam state is not initialized; use AdamState.init(params)")
    if len(params) != len(state.m) or any(p.shape != s for p, s in zip(params, state.shapes)):
        raise ValueError("parameters do not match the Adam state they were initialized with")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


class Adam:
    """Convenience wrapper reading ``.grad`` from the parameters it was built with."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.init(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_update(self.params, [p.grad for p in self.params], self.state)
