"""Fatigue crack growth over a sliced plate and the rasterized FCG library.

Lengths are in mm throughout; SIFs are in MPa*sqrt(m), so crack lengths are
converted to metres inside the SIF formulas and Paris increments come out in
metres per cycle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .field import DigitalLibrary, Field2D, SampleSequence, make_manifest

log = logging.getLogger(__name__)

SIF_UNITS = "MPa*sqrt(m)"


class CrackTooLongError(ValueError):
    pass


class RasterBandExitError(ValueError):
    pass


@dataclass(frozen=True)
class PlateSpec:
    width_mm: float = 10.0
    height_mm: float = 20.0
    initial_crack_mm: float = 1.0
    n_segments: int = 7
    pixel_size_mm: float = 0.075
    # growth span is split into n_segments equal slices ending here
    growth_limit: float = 0.95

    def __post_init__(self):
        if not 0 < self.initial_crack_mm < self.width_mm:
            raise ValueError("initial crack must lie inside the plate width")
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")

    @property
    def max_crack_mm(self) -> float:
        return self.growth_limit * self.width_mm

    def segment_boundaries(self) -> np.ndarray:
        a0, end = self.initial_crack_mm, self.max_crack_mm
        return a0 + (end - a0) * np.arange(1, self.n_segments + 1) / self.n_segments


@dataclass(frozen=True)
class LoadSpec:
    tension_mean: float = 200.0
    shear_mean: float = 100.0
    std: float = 50.0
    stress_ratio: float = 0.0
    min_tension: float = 1.0

    def __post_init__(self):
        if self.tension_mean <= 0 or self.shear_mean < 0 or self.std < 0:
            raise ValueError("load means must be positive and std non-negative")


@dataclass(frozen=True)
class MaterialParams:
    C: float = 9.7e-12
    m: float = 3.0
    sif_units: str = SIF_UNITS

    def __post_init__(self):
        if self.C <= 0 or self.m <= 0:
            raise ValueError("C and m must be positive")


@dataclass(frozen=True)
class RasterSpec:
    """Region of interest: ``nx`` columns from x=0 and an ``ny``-row band centred on the crack plane."""

    nx: int = 132
    ny: int = 96
    pixel_size_mm: float = 0.075


@dataclass(frozen=True)
class SifPair:
    K_I: float
    K_II: float


@dataclass
class CrackPath:
    vertices: np.ndarray  # (n, 2) tip positions in mm
    segment_frames: list[int]  # vertex index recorded at each frame (0 = initial state)
    cycle_counts: np.ndarray  # cycles consumed by each growth increment
    segment_loads: list[tuple[float, float]] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.segment_frames)

    def tip(self, frame_index: int) -> np.ndarray:
        return self.vertices[self.segment_frames[frame_index]]

    def to_json(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "segment_frames": list(self.segment_frames),
            "cycle_counts": self.cycle_counts.tolist(),
            "segment_loads": [list(t) for t in self.segment_loads],
        }

    @classmethod
    def from_json(cls, d: dict) -> "CrackPath":
        return cls(
            np.asarray(d["vertices"], dtype=np.float64).reshape(-1, 2),
            list(d["segment_frames"]),
            np.asarray(d["cycle_counts"], dtype=np.float64),
            [tuple(t) for t in d.get("segment_loads", [])],
        )


def sample_segment_loads(spec: LoadSpec, rng: np.random.Generator) -> tuple[float, float]:
    """Gaussian (tension, shear) in MPa; tension is clamped to ``spec.min_tension``."""
    tension = spec.tension_mean + spec.std * rng.standard_normal()
    shear = spec.shear_mean + spec.std * rng.standard_normal()
    return max(float(tension), spec.min_tension), float(shear)


def geometry_factor(r: float) -> float:
    """Finite-width single-edge-crack correction Y(a/W) for remote tension."""
    return 1.12 - 0.231 * r + 10.55 * r**2 - 21.72 * r**3 + 30.39 * r**4


def sif_edge_crack(a: float, plate: PlateSpec, tension: float, shear: float) -> SifPair:
    """Handbook SIFs at projected crack length ``a`` (mm)."""
    if a <= 0:
        raise ValueError("crack length must be positive")
    if a >= plate.max_crack_mm:
        raise CrackTooLongError(f"a={a:.4g} mm exceeds {plate.max_crack_mm:.4g} mm")
    root = math.sqrt(math.pi * a * 1e-3)
    return SifPair(geometry_factor(a / plate.width_mm) * tension * root, 1.12 * shear * root)


def deflection_angle(sif: SifPair) -> float:
    """Signed kink angle (rad) from the maximum shear stress criterion.

    Evaluated through the mode ratio r = K_II/K_I, which is algebraically the
    same expression and returns exactly 0 for pure mode I. The crack kinks
    opposite the sense of K_II.
    """
    k1, k2 = abs(sif.K_I), sif.K_II
    if k1 == 0 and k2 == 0:
        raise ValueError("deflection angle undefined for zero SIFs")
    if k1 == 0:
        arg = 1.0 / 3.0
    else:
        r2 = (k2 / k1) ** 2
        arg = (3 * r2 + math.sqrt(1 + 8 * r2)) / (1 + 9 * r2)
    theta = math.acos(min(1.0, max(-1.0, arg)))
    return -math.copysign(theta, k2) if k2 != 0 else 0.0


def paris_increment(delta_K: float, cycles: float, mat: MaterialParams) -> float:
    """Crack extension (m) after ``cycles`` cycles at constant SIF range."""
    if delta_K < 0:
        raise ValueError("delta_K must be non-negative")
    return cycles * mat.C * delta_K**mat.m


def cycles_for_increment(delta_a_m: float, delta_K: float, mat: MaterialParams) -> float:
    if delta_K <= 0:
        raise ValueError("delta_K must be positive")
    return delta_a_m / (mat.C * delta_K**mat.m)


def integrate_paris(
    a0_m: float, delta_K: float | Callable[[float], float], n_cycles: int, mat: MaterialParams, block: int = 1000
) -> float:
    """Explicit-Euler integration of da/dN in blocks of ``block`` cycles."""
    a = a0_m
    done = 0
    while done < n_cycles:
        n = min(block, n_cycles - done)
        dk = delta_K(a) if callable(delta_K) else delta_K
        a += paris_increment(dk, n, mat)
        done += n
    return a


def grow_crack(
    plate: PlateSpec = PlateSpec(),
    loads: LoadSpec = LoadSpec(),
    mat: MaterialParams = MaterialParams(),
    seed=0,
    step_mm: float = 0.05,
) -> CrackPath:
    """Grow an edge crack from mid-height across ``plate.n_segments`` slices.

    Loads are redrawn when the tip enters a new slice. Each increment moves the
    tip ``step_mm`` along the MSC direction evaluated at the current projected
    length; a frame is recorded at every slice-boundary crossing.
    """
    rng = np.random.default_rng(seed)
    x, y = plate.initial_crack_mm, plate.height_mm / 2
    verts = [(x, y)]
    frames = [0]
    cycles = []
    seg_loads = []
    da_m = step_mm * 1e-3
    for boundary in plate.segment_boundaries():
        tension, shear = sample_segment_loads(loads, rng)
        seg_loads.append((tension, shear))
        while x < boundary:
            sif = sif_edge_crack(x, plate, tension, shear)
            theta = deflection_angle(sif)
            dk = (1 - loads.stress_ratio) * math.hypot(sif.K_I, sif.K_II)
            cycles.append(cycles_for_increment(da_m, dk, mat))
            x += step_mm * math.cos(theta)
            y += step_mm * math.sin(theta)
            verts.append((x, y))
        frames.append(len(verts) - 1)
    return CrackPath(np.array(verts), frames, np.array(cycles), seg_loads)


_EPS = 1e-9


def _column_rows(path: CrackPath, frame_index: int, plate: PlateSpec, raster: RasterSpec):
    """Row index of the crack in every lit column up to the frame's tip."""
    px = raster.pixel_size_mm
    tip_x = path.tip(frame_index)[0]
    n_cols = min(raster.nx, int(math.floor(tip_x / px + _EPS)) + 1)
    xs = np.arange(n_cols) * px
    ys = np.interp(xs, path.vertices[:, 0], path.vertices[:, 1])  # flat left of the initial tip
    top = plate.height_mm / 2 + raster.ny * px / 2
    rows = np.floor((top - ys) / px + _EPS).astype(int)
    return rows


def path_in_band(path: CrackPath, plate: PlateSpec = PlateSpec(), raster: RasterSpec = RasterSpec()) -> bool:
    rows = _column_rows(path, path.n_frames - 1, plate, raster)
    return bool(np.all((rows >= 0) & (rows < raster.ny)))


def rasterize_path(
    path: CrackPath, frame_index: int, plate: PlateSpec = PlateSpec(), raster: RasterSpec = RasterSpec(), strict: bool = True
) -> Field2D:
    """Binary ``ny x nx`` raster of the crack up to the tip recorded at ``frame_index``.

    One pixel per column: column c is lit in the row the path occupies at the
    column's left edge, so every later frame lights a superset of pixels.
    """
    if not 0 <= frame_index < path.n_frames:
        raise IndexError(f"frame {frame_index} outside 0..{path.n_frames - 1}")
    rows = _column_rows(path, frame_index, plate, raster)
    inside = (rows >= 0) & (rows < raster.ny)
    if strict and not inside.all():
        raise RasterBandExitError("crack path leaves the raster band")
    img = np.zeros((raster.ny, raster.nx), np.float32)
    cols = np.arange(len(rows))
    img[rows[inside], cols[inside]] = 1.0
    return Field2D(img, raster.pixel_size_mm)


def build_fcg_library(
    n_samples: int = 908,
    base_seed: int = 0,
    plate: PlateSpec = PlateSpec(),
    loads: LoadSpec = LoadSpec(),
    mat: MaterialParams = MaterialParams(),
    raster: RasterSpec = RasterSpec(),
    step_mm: float = 0.05,
    on_band_exit: str = "regenerate",
    max_attempts: int = 1000,
    deterministic: bool = False,
) -> DigitalLibrary:
    """Build ``n_samples`` crack sequences of ``plate.n_segments + 1`` frames.

    Sample i first tries seed ``base_seed + i``; a discarded attempt j > 0 uses
    the seed entropy ``[base_seed + i, j]``. Discards are logged in the manifest
    under ``"regenerated"``. With ``on_band_exit="flag"`` band exits are kept,
    clipped, and listed under ``"flagged"`` instead.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if on_band_exit not in ("regenerate", "flag"):
        raise ValueError("on_band_exit must be 'regenerate' or 'flag'")
    samples, regenerated, flagged = [], [], []
    for i in range(n_samples):
        for attempt in range(max_attempts):
            seed = base_seed + i if attempt == 0 else [base_seed + i, attempt]
            try:
                path = grow_crack(plate, loads, mat, seed, step_mm)
            except CrackTooLongError:
                regenerated.append({"sample": i, "attempt": attempt, "reason": "crack-too-long"})
                continue
            if not path_in_band(path, plate, raster):
                if on_band_exit == "regenerate":
                    regenerated.append({"sample": i, "attempt": attempt, "reason": "band-exit"})
                    continue
                flagged.append(i)
            break
        else:
            raise RuntimeError(f"sample {i}: no valid path after {max_attempts} attempts")
        frames = [rasterize_path(path, t, plate, raster, strict=False).values for t in range(path.n_frames)]
        extras = {"seed": seed, "path": path.to_json()}
        samples.append(SampleSequence(np.stack(frames), raster.pixel_size_mm, "one frame per segment-boundary crossing", extras))
    log.info("fcg library: %d samples, %d regenerated attempts", n_samples, len(regenerated))
    params = {
        "plate": asdict(plate),
        "loads": asdict(loads),
        "material": asdict(mat),
        "raster": asdict(raster),
        "step_mm": step_mm,
        "on_band_exit": on_band_exit,
        "sif_model": "finite-width edge crack, projected length",
        "delta_K": "(1-R)*sqrt(K_I^2+K_II^2) at max load",
    }
    manifest = make_manifest(
        "fatigue-crack-growth",
        base_seed,
        params,
        deterministic=deterministic,
        n_samples=n_samples,
        units={"length": "mm", "sif": mat.sif_units, "paris_length": "m"},
        regenerated=regenerated,
        flagged=flagged,
    )
    return DigitalLibrary(tuple(samples), manifest)
