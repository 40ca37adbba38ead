"""Grid, sequence and library containers plus their on-disk format.

A library lives in one directory::

    manifest.json            generator, seed, parameters, sample count, ...
    sample_00000.bin         header | float32 frames (T*H*W, little endian) | crc32
    sample_00000.json        optional per-sample extras (e.g. a crack vertex list)

The 16-byte header is ``<4sHHII``: magic ``b"MEVF"``, format version, T, H, W.
The footer is the CRC32 of header and payload as a little-endian uint32.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import json
import os
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
FRAME_MAGIC = b"MEVF"
HEADER = struct.Struct("<4sHHII")
FOOTER = struct.Struct("<I")
FIXED_TIMESTAMP = "1970-01-01T00:00:00Z"


class LibraryFormatError(Exception):
    """Raised when a library or blob on disk cannot be decoded."""


class ChecksumError(LibraryFormatError):
    """Raised when a blob is truncated or its CRC32 footer does not match."""


class SequenceTooShortError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Field2D:
    """A ``height x width`` grid of float32 values with a physical pixel size."""

    values: np.ndarray
    pixel_size_mm: float = 1.0

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2:
            raise ValueError(f"Field2D needs a 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("Field2D values must be finite")
        if not self.pixel_size_mm > 0:
            raise ValueError("pixel_size_mm must be positive")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, Field2D):
            return NotImplemented
        return self.pixel_size_mm == other.pixel_size_mm and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class SampleSequence:
    """Ordered frames of one simulated sample, stored as a ``(T, H, W)`` array.

    ``extras`` carries JSON-serializable side data such as the crack vertex list.
    """

    data: np.ndarray
    pixel_size_mm: float = 1.0
    dt_label: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        d = _frozen(self.data)
        if d.ndim != 3:
            raise ValueError(f"sequence data must be (T, H, W), got {d.shape}")
        if d.shape[0] < 2:
            raise ValueError("a sequence needs at least two frames")
        if not np.all(np.isfinite(d)):
            raise ValueError("sequence values must be finite")
        object.__setattr__(self, "data", d)

    @classmethod
    def from_frames(cls, frames: Sequence[Field2D], dt_label: str = "", extras: dict | None = None):
        if not frames:
            raise ValueError("no frames")
        px = frames[0].pixel_size_mm
        shape = frames[0].shape
        for f in frames:
            if f.shape != shape or f.pixel_size_mm != px:
                raise ValueError("all frames must share shape and pixel size")
        return cls(np.stack([f.values for f in frames]), px, dt_label, dict(extras or {}))

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.data.shape[1:]

    @property
    def frames(self) -> list[Field2D]:
        return [Field2D(f, self.pixel_size_mm) for f in self.data]

    def frame(self, i: int) -> Field2D:
        return Field2D(self.data[i], self.pixel_size_mm)

    def __eq__(self, other):
        if not isinstance(other, SampleSequence):
            return NotImplemented
        return (
            self.pixel_size_mm == other.pixel_size_mm
            and self.dt_label == other.dt_label
            and self.extras == other.extras
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class DigitalLibrary:
    samples: tuple[SampleSequence, ...]
    manifest: dict

    def __post_init__(self):
        samples = tuple(self.samples)
        if samples:
            ref = samples[0]
            for s in samples[1:]:
                if s.data.shape != ref.data.shape or s.pixel_size_mm != ref.pixel_size_mm:
                    raise ValueError("all samples must share frame dimensions and sequence length")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "manifest", dict(self.manifest))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def sequence_length(self) -> int:
        return len(self.samples[0]) if self.samples else 0

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.samples[0].frame_shape

    def stack(self) -> np.ndarray:
        """All frames as an ``(N, T, H, W)`` float32 array."""
        return np.stack([s.data for s in self.samples])

    def __eq__(self, other):
        if not isinstance(other, DigitalLibrary):
            return NotImplemented
        return self.manifest == other.manifest and self.samples == other.samples


def make_manifest(generator: str, seed: int, params: dict, *, deterministic: bool = False, **extra) -> dict:
    """Manifest skeleton; ``deterministic`` pins the timestamp so reruns hash identically."""
    created = FIXED_TIMESTAMP if deterministic else _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    m = {"generator": generator, "seed": int(seed), "params": params, "created": created}
    m.update(extra)
    return m


# ---------------------------------------------------------------------------
# windowing and splitting


@dataclass(frozen=True)
class WindowedDataset:
    """Input/target frame stacks cut from sequences by a sliding window.

    ``inputs`` is ``(N, in_len, H, W)`` and ``targets`` is ``(N, out_len, H, W)``.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets disagree on item count")
        if self.inputs.shape[2:] != self.targets.shape[2:]:
            raise ValueError("inputs and targets disagree on frame shape")

    @property
    def in_len(self) -> int:
        return self.inputs.shape[1]

    @property
    def out_len(self) -> int:
        return self.targets.shape[1]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def items(self) -> list[tuple[list[Field2D], list[Field2D]]]:
        return [([Field2D(f) for f in x], [Field2D(f) for f in y]) for x, y in zip(self.inputs, self.targets)]

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(self.inputs[idx], self.targets[idx])


def window_count(n_frames: int, in_len: int, out_len: int, step: int = 1) -> int:
    if n_frames < in_len + out_len:
        return 0
    return (n_frames - in_len - out_len) // step + 1


def window_starts(n_frames: int, in_len: int, out_len: int, step: int = 1) -> list[int]:
    return [j * step for j in range(window_count(n_frames, in_len, out_len, step))]


def slide_windows(seq: SampleSequence, in_len: int, out_len: int, step: int = 1) -> list[tuple[np.ndarray, np.ndarray]]:
    """Cut ``seq`` into (inputs, targets) pairs; window j starts at frame ``j*step``."""
    if in_len < 1 or out_len < 1 or step < 1:
        raise ValueError("in_len, out_len and step must be >= 1")
    if len(seq) < in_len + out_len:
        raise SequenceTooShortError(f"sequence of {len(seq)} frames cannot hold a window of {in_len}+{out_len}")
    d = seq.data
    return [(d[s : s + in_len], d[s + in_len : s + in_len + out_len]) for s in window_starts(len(seq), in_len, out_len, step)]


def window_library(lib: DigitalLibrary | Iterable[SampleSequence], in_len: int, out_len: int, step: int = 1) -> WindowedDataset:
    samples = lib.samples if isinstance(lib, DigitalLibrary) else list(lib)
    pairs = [p for s in samples for p in slide_windows(s, in_len, out_len, step)]
    if not pairs:
        raise ValueError("no windows")
    return WindowedDataset(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))


def split_library(lib: DigitalLibrary, n_train: int, seed: int = 0, shuffle: bool = False) -> tuple[DigitalLibrary, DigitalLibrary]:
    """Partition into train/test. Without ``shuffle`` the first ``n_train`` samples train."""
    n = len(lib)
    if not 0 < n_train < n:
        raise ValueError(f"n_train must be in (0, {n}), got {n_train}")
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    tr, te = sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())

    def part(name, idx):
        m = dict(lib.manifest)
        m["split"] = {"part": name, "n_train": n_train, "seed": seed, "shuffle": shuffle, "indices": idx}
        return DigitalLibrary(tuple(lib.samples[i] for i in idx), m)

    return part("train", tr), part("test", te)


# ---------------------------------------------------------------------------
# serialization


def write_blob(path: str | os.PathLike, array: np.ndarray, magic: bytes = FRAME_MAGIC) -> None:
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 1:
        a = a.reshape(1, 1, -1)
    elif a.ndim == 2:
        a = a.reshape(1, *a.shape)
    if a.ndim != 3:
        raise ValueError("blobs hold at most three dimensions")
    head = HEADER.pack(magic, FORMAT_VERSION, *a.shape)
    body = head + np.ascontiguousarray(a).tobytes()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(FOOTER.pack(zlib.crc32(body)))


def read_blob(path: str | os.PathLike, magic: bytes = FRAME_MAGIC) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size + FOOTER.size:
        raise ChecksumError(f"{path}: truncated ({len(raw)} bytes)")
    mg, version, t, h, w = HEADER.unpack_from(raw)
    if mg != magic:
        raise LibraryFormatError(f"{path}: bad magic {mg!r}")
    if version != FORMAT_VERSION:
        raise LibraryFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    n = HEADER.size + 4 * t * h * w
    if len(raw) != n + FOOTER.size:
        raise ChecksumError(f"{path}: expected {n + FOOTER.size} bytes, found {len(raw)}")
    (crc,) = FOOTER.unpack_from(raw, n)
    if zlib.crc32(raw[:n]) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    return np.frombuffer(raw, dtype="<f4", count=t * h * w, offset=HEADER.size).reshape(t, h, w).astype(np.float32)


def save_library(lib: DigitalLibrary, path: str | os.PathLike) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    ref = lib.samples[0] if lib.samples else None
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_samples": len(lib),
        "sequence_length": lib.sequence_length,
        "frame_shape": list(lib.frame_shape) if ref is not None else None,
        "pixel_size_mm": ref.pixel_size_mm if ref is not None else None,
        "dt_label": ref.dt_label if ref is not None else "",
        "payload_sha256": [],
        "library": lib.manifest,
    }
    for i, s in enumerate(lib.samples):
        write_blob(root / f"sample_{i:05d}.bin", s.data)
        manifest["payload_sha256"].append(hashlib.sha256(s.data.astype("<f4").tobytes()).hexdigest())
        extra_path = root / f"sample_{i:05d}.json"
        if s.extras:
            extra_path.write_text(json.dumps(s.extras, sort_keys=True))
        elif extra_path.exists():
            extra_path.unlink()
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_library(path: str | os.PathLike) -> DigitalLibrary:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise LibraryFormatError(f"{root}: no manifest.json") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise LibraryFormatError(f"{root}: format version {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    px = manifest["pixel_size_mm"]
    samples = []
    for i in range(manifest["n_samples"]):
        data = read_blob(root / f"sample_{i:05d}.bin")
        extra_path = root / f"sample_{i:05d}.json"
        extras = json.loads(extra_path.read_text()) if extra_path.exists() else {}
        samples.append(SampleSequence(data, px, manifest["dt_label"], extras))
    return DigitalLibrary(tuple(samples), manifest["library"])


def library_digest(lib: DigitalLibrary) -> str:
    """SHA-256 over frame payloads, extras and the manifest minus its timestamp."""
    h = hashlib.sha256()
    m = {k: v for k, v in lib.manifest.items() if k != "created"}
    h.update(json.dumps(m, sort_keys=True, default=str).encode())
    for s in lib.samples:
        h.update(s.data.astype("<f4").tobytes())
        h.update(json.dumps(s.extras, sort_keys=True).encode())
    return h.hexdigest()


def export_pgm(fld: Field2D | np.ndarray, path: str | os.PathLike) -> None:
    """Write a binary 8-bit PGM, min-max scaled (a constant field maps to 0)."""
    v = fld.values if isinstance(fld, Field2D) else np.asarray(fld, dtype=np.float32)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros(v.shape, np.uint8) if hi == lo else np.round((v - lo) / (hi - lo) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode())
        fh.write(scaled.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise LibraryFormatError(f"{path}: not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def replace_manifest(lib: DigitalLibrary, **updates: Any) -> DigitalLibrary:
    m = dict(lib.manifest)
    m.update(updates)
    return dataclasses.replace(lib, manifest=m)
