"""Gray-Scott reaction-diffusion solver and the Turing-pattern library builder.

The solver is explicit Euler on a periodic grid with the 5-point Laplacian.
Arrays may carry leading batch axes; the stencil acts on the last two, so a
whole library is advanced as one ``(N, H, W)`` array. Every cell is updated
with the same fixed sequence of float operations, which makes the update
exactly equivariant under periodic translation.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .field import DigitalLibrary, Field2D, SampleSequence, make_manifest

log = logging.getLogger(__name__)


class SolverInstabilityError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite concentration at solver step {step}")
        self.step = step


@dataclass(frozen=True)
class GrayScottParams:
    D_u: float = 0.12
    D_v: float = 0.08
    f: float = 0.02
    k: float = 0.05
    dt: float = 1.0
    grid: tuple[int, int] = (200, 200)
    pixel_size_mm: float = 1.0
    # the equations are dimensionless; the stencil uses this spacing
    spacing: float = 1.0

    def __post_init__(self):
        if min(self.D_u, self.D_v, self.f, self.k) < 0:
            raise ValueError("diffusivities and rates must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        dmax = max(self.D_u, self.D_v)
        if dmax > 0 and self.dt > self.spacing**2 / (4 * dmax):
            raise ValueError(f"dt={self.dt} violates the explicit stability bound {self.spacing**2 / (4 * dmax):.4g}")
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))


@dataclass(frozen=True)
class GrayScottState:
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0
    step: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must have the same shape")

    def u_field(self, pixel_size_mm: float = 1.0) -> Field2D:
        return Field2D(self.u, pixel_size_mm)


def laplacian(z: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Periodic 5-point Laplacian over the last two axes."""
    z = np.asarray(z)
    if z.ndim < 2 or z.shape[-1] < 3 or z.shape[-2] < 3:
        raise ValueError(f"grid too small for the 5-point stencil: {z.shape}")
    out = (
        np.roll(z, 1, axis=-2)
        + np.roll(z, -1, axis=-2)
        + np.roll(z, 1, axis=-1)
        + np.roll(z, -1, axis=-1)
        - 4 * z
    )
    if spacing != 1.0:
        out = out / (spacing * spacing)
    return out


def _check_finite(u, v, step):
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise SolverInstabilityError(step)


def gs_step(state: GrayScottState, p: GrayScottParams, check: bool = True) -> GrayScottState:
    u, v = state.u, state.v
    if u.shape[-2:] != p.grid:
        raise ValueError(f"state grid {u.shape[-2:]} does not match params grid {p.grid}")
    # non-finite values are reported by the instability check, not by numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        uvv = u * v * v
        du = p.D_u * laplacian(u, p.spacing) - uvv + p.f * (1 - u)
        dv = p.D_v * laplacian(v, p.spacing) + uvv - (p.f + p.k) * v
        u_new = u + p.dt * du
        v_new = v + p.dt * dv
    if check:
        _check_finite(u_new, v_new, state.step + 1)
    return GrayScottState(u_new, v_new, state.t + p.dt, state.step + 1)


def run(state: GrayScottState, p: GrayScottParams, n_steps: int, check_every: int = 100) -> GrayScottState:
    for i in range(n_steps):
        state = gs_step(state, p, check=False)
        if (i + 1) % check_every == 0 or i + 1 == n_steps:
            _check_finite(state.u, state.v, state.step)
    return state


def random_initial_condition(grid=(200, 200), seed: int = 0, dtype=np.float32) -> GrayScottState:
    """Background (u, v) = (1, 0) with 3-8 square patches at (0.5, 0.25) plus noise."""
    h, w = (int(g) for g in grid)
    if h < 16 or w < 16:
        raise ValueError("grid must be at least 16x16")
    rng = np.random.default_rng(seed)
    u = np.ones((h, w), dtype=np.float64)
    v = np.zeros((h, w), dtype=np.float64)
    for _ in range(int(rng.integers(3, 9))):
        side = int(rng.integers(10, 21))
        side_r, side_c = min(side, h), min(side, w)
        r = int(rng.integers(0, h - side_r + 1))
        c = int(rng.integers(0, w - side_c + 1))
        u[r : r + side_r, c : c + side_c] = 0.5 + rng.uniform(-0.02, 0.02, (side_r, side_c))
        v[r : r + side_r, c : c + side_c] = 0.25 + rng.uniform(-0.02, 0.02, (side_r, side_c))
    return GrayScottState(u.astype(dtype), v.astype(dtype))


def build_turing_library(
    n_sequences: int = 15,
    frames_per_sequence: int = 68,
    record_stride: int = 20,
    base_seed: int = 0,
    p: GrayScottParams | None = None,
    burn_in: int = 200,
    deterministic: bool = False,
) -> DigitalLibrary:
    """Simulate ``n_sequences`` runs and record the u field every ``record_stride`` steps.

    Sequence i uses seed ``base_seed + i``. All sequences are advanced together
    as one batch; the result is identical to advancing them one at a time.
    """
    p = p or GrayScottParams()
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    if frames_per_sequence < 21:
        raise ValueError("frames_per_sequence must be >= 21")
    if record_stride < 1 or burn_in < 0:
        raise ValueError("record_stride must be >= 1 and burn_in >= 0")
    ics = [random_initial_condition(p.grid, base_seed + i) for i in range(n_sequences)]
    state = GrayScottState(np.stack([s.u for s in ics]), np.stack([s.v for s in ics]))
    state = run(state, p, burn_in) if burn_in else state
    frames = [state.u.copy()]
    for _ in range(frames_per_sequence - 1):
        state = run(state, p, record_stride)
        frames.append(state.u.copy())
    data = np.stack(frames, axis=1)  # (N, T, H, W)
    log.info("turing library: %d sequences x %d frames", n_sequences, frames_per_sequence)
    samples = tuple(
        SampleSequence(data[i], p.pixel_size_mm, f"{record_stride} solver steps (dt={p.dt}) per frame", {"seed": base_seed + i})
        for i in range(n_sequences)
    )
    params = asdict(p)
    params["grid"] = list(p.grid)
    params.update(burn_in=burn_in, record_stride=record_stride, frames_per_sequence=frames_per_sequence, species="u")
    return DigitalLibrary(samples, make_manifest("gray-scott", base_seed, params, deterministic=deterministic, n_sequences=n_sequences))
