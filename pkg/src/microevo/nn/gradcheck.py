"""Central finite-difference checks for the tape's gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def numeric_grad(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-6) -> np.ndarray:
    """d f() / d t by central differences; ``f`` must return a scalar tensor."""
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = float(f().data)
        flat[i] = old - eps
        lo = float(f().data)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm; 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-6) -> list[float]:
    """Relative error between backprop and finite differences for each tensor.

    Runs in float64; ``f`` is called repeatedly and must rebuild the graph.
    """
    with precision(np.float64):
        for t in tensors:
            if t.data.dtype != np.float64:
                raise TypeError("gradient checks need float64 tensors")
            t.grad = None
        f().backward()
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        return [relative_error(a, numeric_grad(f, t, eps)) for a, t in zip(analytic, tensors)]
