"""Evaluation metrics, cost accounting and weight analysis.

Byte counts are raw integers everywhere; :func:`format_kb` renders them with
1 kB = 1000 bytes for human-readable output.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .field import DigitalLibrary, Field2D, SampleSequence
from .models import Model, Persistence, rollout_autoregressive

PersistenceModel = Persistence

__all__ = [
    "mae",
    "ErrorCurve",
    "error_curve",
    "GroundTruthStub",
    "PersistenceModel",
    "memory_pixel",
    "memory_vector",
    "memory_model",
    "format_kb",
    "interface_thickness",
    "WeightStats",
    "weight_statistics",
    "DensityReport",
    "connectivity_density",
    "EvalReport",
]


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Field2D) else np.asarray(x)


def mae(pred, truth) -> float:
    """Mean absolute pixel error, ``sum |P - GT| / (Nx * Ny)``.

    Stacks of frames are averaged over every pixel of every frame.
    """
    p, t = _values(pred), _values(truth)
    if p.shape != t.shape:
        raise ValueError(f"mae: shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("mae: empty field")
    return float(np.mean(np.abs(p.astype(np.float64) - t.astype(np.float64))))


# ---------------------------------------------------------------------------
# error curves


@dataclass(frozen=True)
class ErrorCurve:
    per_step: list[float]
    cumulative: list[float]

    @property
    def total(self) -> float:
        return self.cumulative[-1]


class GroundTruthStub:
    """Predictor that returns the true continuation of any context it has seen.

    Contexts are matched by their exact bytes, so it only works on the
    sequences it was built from; that is the point of an oracle stub.
    """

    def __init__(self, sequences: Iterable, in_len: int, out_len: int = 1):
        self.in_len, self.out_len = in_len, out_len
        self._next: dict[bytes, np.ndarray] = {}
        for seq in _as_arrays(sequences):
            for s in range(seq.shape[0] - in_len - out_len + 1):
                key = np.ascontiguousarray(seq[s : s + in_len], np.float32).tobytes()
                self._next.setdefault(key, seq[s + in_len : s + in_len + out_len].astype(np.float32))

    def predict(self, frames: np.ndarray) -> np.ndarray:
        x = np.asarray(frames, np.float32)
        if x.ndim == 4:
            return np.stack([self.predict(f) for f in x])
        try:
            return self._next[np.ascontiguousarray(x).tobytes()].copy()
        except KeyError:
            raise KeyError("context not found in the stub's sequences") from None


def _as_arrays(sequences) -> list[np.ndarray]:
    if isinstance(sequences, DigitalLibrary):
        return [s.data for s in sequences.samples]
    out = []
    for s in sequences:
        out.append(s.data if isinstance(s, SampleSequence) else np.asarray(s))
    return out


def error_curve(predictor, sequences, horizon: int, refeed_threshold: float | None = None) -> ErrorCurve:
    """Autoregressive per-step MAE averaged over sequences, plus its running sum.

    Each sequence is seeded with its first ``in_len`` true frames.
    """
    seqs = _as_arrays(sequences)
    if not seqs:
        raise ValueError("error_curve: no sequences")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n_in = predictor.in_len
    for s in seqs:
        if s.shape[0] < n_in + horizon:
            raise ValueError(f"horizon {horizon} exceeds the {s.shape[0] - n_in} truth frames available")
    sums = np.zeros(horizon)
    for s in seqs:
        pred = rollout_autoregressive(predictor, s[:n_in], horizon, refeed_threshold)
        sums += [mae(pred[i], s[n_in + i]) for i in range(horizon)]
    per_step = (sums / len(seqs)).tolist()
    return ErrorCurve(per_step, np.cumsum(per_step).tolist())


# ---------------------------------------------------------------------------
# memory accounting


def _positive(**kw) -> None:
    for k, v in kw.items():
        if v < 0:
            raise ValueError(f"{k} must be non-negative")


def memory_pixel(dtype_bytes: int, n_x: int, n_y: int) -> int:
    """Bytes for one ``n_x`` by ``n_y`` raster."""
    _positive(dtype_bytes=dtype_bytes, n_x=n_x, n_y=n_y)
    return dtype_bytes * n_x * n_y


def memory_vector(n_nodes: int, dtype_bytes: int = 4) -> int:
    """Bytes for ``n_nodes`` 2-D vertices plus a 2x3 affine transformation matrix."""
    _positive(n_nodes=n_nodes, dtype_bytes=dtype_bytes)
    return 2 * dtype_bytes * n_nodes + 6 * dtype_bytes


def memory_model(dtype_bytes: int, n_params: int) -> int:
    _positive(dtype_bytes=dtype_bytes, n_params=n_params)
    return dtype_bytes * n_params


def format_kb(n_bytes: int) -> str:
    return f"{n_bytes / 1000:.3f} kB"


# ---------------------------------------------------------------------------
# interface thickness


def _longest_runs(mask: np.ndarray) -> np.ndarray:
    """Longest run of True per column."""
    best = np.zeros(mask.shape[1], dtype=np.int64)
    run = np.zeros(mask.shape[1], dtype=np.int64)
    for row in mask:
        run = np.where(row, run + 1, 0)
        np.maximum(best, run, out=best)
    return best


def interface_thickness(fld, threshold: float = 0.5) -> float:
    """Median over lit columns of the longest vertical run above ``threshold``.

    Columns are the interface normal for near-horizontal cracks. Returns 0
    for a field with no pixel above the threshold.
    """
    v = _values(fld)
    if v.ndim != 2 or v.size == 0:
        raise ValueError("interface_thickness expects a nonempty 2-D field")
    runs = _longest_runs(v > threshold)
    lit = runs[runs > 0]
    return float(np.median(lit)) if lit.size else 0.0


# ---------------------------------------------------------------------------
# weight analysis


def _conv_kernels(source) -> dict[str, np.ndarray]:
    """Named convolution-kernel arrays (biases excluded) from a model or mapping."""
    if isinstance(source, Model):
        out = {}
        for lname, layer in source.conv_layers().items():
            for pname, p in layer.params.items():
                if not pname.startswith("b"):
                    out[f"{lname}.{pname}"] = p.data
        return out
    if isinstance(source, Mapping):
        return {str(k): np.asarray(getattr(v, "data", v)) for k, v in source.items()}
    return {"weights": np.asarray(getattr(source, "data", source), dtype=np.float64)}


@dataclass
class WeightStats:
    edges: np.ndarray
    counts: np.ndarray
    pooled_variance: float
    layer_variance: dict[str, float]
    n_weights: int

    def to_dict(self) -> dict:
        return {
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "pooled_variance": self.pooled_variance,
            "layer_variance": self.layer_variance,
            "n_weights": self.n_weights,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def weight_statistics(source, bins: int = 101) -> WeightStats:
    """Histogram of pooled kernel values over ``[-max|w|, max|w|]`` and population variances."""
    kernels = _conv_kernels(source)
    if not kernels:
        raise ValueError("no convolution kernels to analyze")
    flat = np.concatenate([k.astype(np.float64).ravel() for k in kernels.values()])
    m = float(np.max(np.abs(flat))) if flat.size else 0.0
    half = m if m > 0 else 1.0
    counts, edges = np.histogram(flat, bins=bins, range=(-half, half))
    return WeightStats(
        edges=edges,
        counts=counts,
        pooled_variance=float(np.var(flat)),
        layer_variance={k: float(np.var(v.astype(np.float64))) for k, v in kernels.items()},
        n_weights=int(flat.size),
    )


@dataclass(frozen=True)
class DensityReport:
    pooled: float
    per_layer: dict[str, float]
    threshold: float


def connectivity_density(source, threshold: float = 0.001) -> DensityReport:
    """Fraction of kernel weights with ``|w| >= threshold``, pooled and per layer."""
    kernels = _conv_kernels(source)
    total = sum(k.size for k in kernels.values())
    if total == 0:
        raise ValueError("connectivity_density needs at least one weight")
    kept = {n: int(np.count_nonzero(np.abs(k) >= threshold)) for n, k in kernels.items()}
    per_layer = {n: kept[n] / kernels[n].size for n in kernels if kernels[n].size}
    return DensityReport(sum(kept.values()) / total, per_layer, threshold)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    per_step_mae: list[float]
    cumulative_mae: list[float]
    n_params: int
    memory_bytes: dict[str, int]
    interface_thickness: float | None = None
    weight_variance: float | None = None
    weight_histogram: dict | None = None
    density: float | None = None
    density_per_layer: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(v < 0 or math.isnan(v) for v in self.per_step_mae):
            raise ValueError("MAE values must be non-negative")
        if self.density is not None and not 0.0 <= self.density <= 1.0:
            raise ValueError("density must lie in [0, 1]")
        if self.n_params < 0:
            raise ValueError("parameter count must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> Path:
        p = Path(path)
        p.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return p

    def write_curve_csv(self, path) -> Path:
        p = Path(path)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mae", "cumulative_mae"])
            for i, (a, c) in enumerate(zip(self.per_step_mae, self.cumulative_mae), start=1):
                w.writerow([i, repr(a), repr(c)])
        return p


def mean_thickness(frames: Sequence, threshold: float = 0.5) -> float:
    vals = [interface_thickness(f, threshold) for f in frames]
    lit = [v for v in vals if v > 0]
    return float(np.mean(lit)) if lit else 0.0
