"""QLT tensor file format and directory checkpoints.

A QLT file is: magic b"QLT1", u32 little-endian rank, rank x u32
little-endian extents, then the row-major IEEE-754 little-endian f32
payload. A checkpoint is a directory of named QLT files plus a
manifest.json mapping {name -> {file, shape}}.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QLT1"


class QltError(ValueError):
    """Raised on malformed QLT files or checkpoint manifests."""


def save_qlt(path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        for e in arr.shape:
            f.write(struct.pack("<I", e))
        f.write(arr.tobytes())


def load_qlt(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise QltError(f"{path}: bad magic {blob[:4]!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    payload = blob[8 + 4 * rank:]
    n = int(np.prod(shape)) if rank else 1
    if len(payload) != 4 * n:
        raise QltError(f"{path}: payload is {len(payload)} bytes, "
                       f"expected {4 * n} for shape {shape}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_checkpoint(directory, named_arrays: dict, extra: dict | None = None):
    """Write named arrays as QLT files plus a manifest.

    `extra` entries are copied verbatim into the manifest (e.g. the
    "ip_attention" section naming per-site weight tensors).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"tensors": {}}
    for name in sorted(named_arrays):
        fname = name.replace("/", "_").replace(".", "_") + ".qlt"
        save_qlt(directory / fname, named_arrays[name])
        manifest["tensors"][name] = {
            "file": fname,
            "shape": list(np.asarray(named_arrays[name]).shape),
        }
    if extra:
        manifest.update(extra)
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_checkpoint(directory) -> tuple[dict, dict]:
    """Return ({name -> ndarray}, manifest)."""
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise QltError(f"no manifest.json in {directory}")
    with open(mpath) as f:
        manifest = json.load(f)
    arrays = {}
    for name, entry in manifest["tensors"].items():
        arr = load_qlt(directory / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise QltError(f"checkpoint tensor {name}: file shape "
                           f"{list(arr.shape)} != manifest shape {entry['shape']}")
        arrays[name] = arr
    return arrays, manifest
