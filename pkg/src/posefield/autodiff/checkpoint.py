"""Versioned checkpoint container: manifest + raw little-endian buffers.

Layout:
    bytes 0..4   magic b"PFCK1"
    bytes 5..13  uint64 LE manifest length
    manifest     UTF-8 JSON: {"meta": {...}, "tensors": {name: entry}}
                 entry = {"shape": [...], "dtype": "float32", "offset": int}
    data         concatenated raw buffers, offsets relative to data start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PFCK1"

_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "|u1", "int64": "<i8"}


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    manifest: dict = {"meta": meta or {}, "tensors": {}}
    buffers = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise ValueError(f"{name}: unsupported checkpoint dtype {dtype_name}")
        raw = arr.astype(_DTYPES[dtype_name]).tobytes()
        manifest["tensors"][name] = {
            "shape": list(arr.shape), "dtype": dtype_name, "offset": offset,
        }
        buffers.append(raw)
        offset += len(raw)
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in buffers:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {data[:5]!r})")
    (mlen,) = struct.unpack("<Q", data[5:13])
    manifest = json.loads(data[13:13 + mlen].decode("utf-8"))
    base = 13 + mlen
    arrays: dict[str, np.ndarray] = {}
    for name, entry in manifest["tensors"].items():
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype=dt, count=count, offset=start)
        arrays[name] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return arrays, manifest["meta"]
