"""Flat parameter container: name -> (shape, little-endian float64 payload).

Entries are written sorted by name so identical parameters always produce
byte-identical files. A JSON sidecar (written by the trainer) carries resume
metadata; this module only owns the array container.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TVLM"
VERSION = 1


def save_arrays(arrays: dict[str, np.ndarray], path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8")  # keep 0-d shapes intact
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * n)
            if len(payload) != 8 * n:
                raise ValueError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return out
