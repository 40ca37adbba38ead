"""Parameter checkpoints in the library blob convention.

A checkpoint directory holds ``manifest.json`` (layer registry, parameter
names, shapes and offsets, plus caller metadata) and ``params.bin``, a
``1 x 1 x N`` float32 blob with the ``MEVP`` magic and a CRC32 footer.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from ..field import LibraryFormatError, read_blob, write_blob

PARAM_MAGIC = b"MEVP"


def save_params(named: dict[str, np.ndarray], path: str | os.PathLike, meta: dict | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    registry, chunks, offset = [], [], 0
    for name, arr in named.items():
        a = np.asarray(arr, dtype=np.float32)
        registry.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.ravel())
        offset += a.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, np.float32)
    write_blob(root / "params.bin", flat.reshape(1, 1, -1), magic=PARAM_MAGIC)
    manifest = {"params": registry, "n_params": int(offset), "meta": meta or {}, "sha256": hashlib.sha256(flat.tobytes()).hexdigest()}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_params(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise LibraryFormatError(f"{root}: no manifest.json") from exc
    flat = read_blob(root / "params.bin", magic=PARAM_MAGIC).ravel()
    if flat.size != manifest["n_params"]:
        raise LibraryFormatError(f"{root}: blob holds {flat.size} values, manifest says {manifest['n_params']}")
    out = {}
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        out[entry["name"]] = flat[entry["offset"] : entry["offset"] + n].reshape(entry["shape"]).copy()
    return out, manifest
