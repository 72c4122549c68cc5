"""Binary tensor container used by every dataset / checkpoint file.

Layout of one tensor record:

    magic   4 bytes         b"IDA1"
    rank    u64 little-endian
    extents rank * u64 little-endian
    data    product(extents) * f64 little-endian, row-major

Files that hold several tensors simply concatenate records; named-tensor
records prefix each tensor with a length-prefixed UTF-8 name.  Metadata
travels as one length-prefixed UTF-8 JSON blob.
"""

from __future__ import annotations

import json
import os
import struct
from typing import BinaryIO

import numpy as np

from .tensor import Tensor

MAGIC = b"IDA1"


class ContainerError(IOError):
    """Corrupt or mismatched container data."""


def write_tensor(f: BinaryIO, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    f.write(MAGIC)
    f.write(struct.pack("<Q", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes())


def read_tensor(f: BinaryIO) -> Tensor:
    magic = f.read(4)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<Q", _read_exact(f, 8))
    if rank > 64:
        raise ContainerError(f"implausible rank {rank}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(f, 8 * count)
    arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
    return Tensor(arr)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ContainerError("truncated container")
    return buf


def _write_blob(f: BinaryIO, blob: bytes) -> None:
    f.write(struct.pack("<Q", len(blob)))
    f.write(blob)


def _read_blob(f: BinaryIO) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(f, 8))
    return _read_exact(f, n)


def write_metadata(f: BinaryIO, meta: dict) -> None:
    _write_blob(f, json.dumps(meta, sort_keys=True).encode("utf-8"))


def read_metadata(f: BinaryIO) -> dict:
    return json.loads(_read_blob(f).decode("utf-8"))


def write_named_tensors(f: BinaryIO, tensors: dict) -> None:
    f.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        _write_blob(f, name.encode("utf-8"))
        write_tensor(f, arr)


def read_named_tensors(f: BinaryIO) -> dict:
    (n,) = struct.unpack("<Q", _read_exact(f, 8))
    out = {}
    for _ in range(n):
        name = _read_blob(f).decode("utf-8")
        out[name] = read_tensor(f)
    return out


def save_tensor(path, array) -> None:
    atomic_write(path, lambda f: write_tensor(f, array))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return read_tensor(f)


def atomic_write(path, writer) -> None:
    """Write a file via temp-then-rename so partial writes never land."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        writer(f)
    os.replace(tmp, path)
