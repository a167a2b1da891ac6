"""Versioned binary container of named float64 tensors.

Layout (all integers little-endian uint32):
  magic b"HTANSPD" | version | per tensor:
    name_len | UTF-8 name | rank | dims... | row-major float64 payload (LE)
Tensors repeat until EOF. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

MAGIC = b"HTANSPD"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed container or tensor mismatch against an expected schema."""


def write_tensors(fh, tensors: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy(order="C")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_tensors(fh, tensors)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated container while reading {what}")
    return buf


def read_tensors(fh) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic string; not a tensor container")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    while True:
        head = fh.read(4)
        if not head:
            break
        if len(head) != 4:
            raise CheckpointError("truncated container while reading name length")
        (name_len,) = struct.unpack("<I", head)
        name = _read_exact(fh, name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
        count = 1
        for d in dims:
            count *= d
        payload = _read_exact(fh, 8 * count, f"payload of '{name}'")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        out[name] = arr
    return out


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_tensors(fh)
