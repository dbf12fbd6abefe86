"""Deterministic binary checkpoint container.

Layout (all integers little-endian):

    magic   b"CCKP"
    u32     format version (currently 1)
    u64     metadata length
    bytes   metadata JSON (sorted keys; floats stored as hex strings
            elsewhere in meta so round-trips are bit-exact)
    u64     tensor count
    per tensor, sorted by name:
        u16   name length, name utf-8
        u8    dtype code (0=float64, 1=float32, 2=int64)
        u8    ndim
        u64*  dims
        bytes C-order row-major data

Writing is canonical (sorted names, compact JSON), so save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import atomic_write_bytes

MAGIC = b"CCKP"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def require(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        return self.tensors[name]


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta_blob = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<Q", len(meta_blob)))
    parts.append(meta_blob)
    parts.append(struct.pack("<Q", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        parts.append(little.tobytes(order="C"))
    atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    rd = _Reader(blob, path)
    if rd.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = rd.unpack("<Q")
    try:
        meta = json.loads(rd.take(meta_len).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    (count,) = rd.unpack("<Q")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        code, ndim = rd.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        shape = rd.unpack(f"<{ndim}Q") if ndim else ()
        dtype = _CODE_DTYPES[code]
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = rd.take(n_items * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
    if rd.pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return Checkpoint(meta=meta, tensors=tensors)


def float_to_meta(x: float) -> str:
    """Exact float encoding for metadata (hex round-trips bit-for-bit)."""
    return float(x).hex()


def float_from_meta(s: str) -> float:
    return float.fromhex(s)
