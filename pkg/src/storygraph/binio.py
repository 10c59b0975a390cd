"""Tiny versioned binary container: magic, version, JSON meta, raw arrays.

Layout (little-endian):
    magic        4 bytes
    version      uint32
    meta_len     uint64
    meta         UTF-8 JSON, must hold "arrays": [{name, dtype, shape}, ...]
    arrays       raw C-order bytes, in meta order, each prefixed by uint64 length
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class ContainerError(Exception):
    pass


def write_container(
    path: str | Path,
    magic: bytes,
    version: int,
    meta: dict,
    arrays: dict[str, np.ndarray],
) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta = dict(meta)
    meta["arrays"] = [
        {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
        for name, arr in arrays.items()
    ]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", version))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            raw = np.ascontiguousarray(arr).tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def read_container(
    path: str | Path, magic: bytes, version: int
) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise ContainerError(f"bad magic {got!r}, expected {magic!r}")
        (ver,) = struct.unpack("<I", fh.read(4))
        if ver != version:
            raise ContainerError(f"unsupported version {ver}, expected {version}")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for spec in meta["arrays"]:
            (nbytes,) = struct.unpack("<Q", fh.read(8))
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise ContainerError("truncated array block")
            arr = np.frombuffer(raw, dtype=np.dtype(spec["dtype"]))
            arrays[spec["name"]] = arr.reshape(spec["shape"]).copy()
    return meta, arrays
