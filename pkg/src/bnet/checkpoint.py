"""Binary checkpoint format.

Layout (little-endian)::

    b"BNETCKPT"  u32 version  u32 tensor count
    per tensor:  u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64),
                 u8 rank, rank x u32 dims, raw values (C order)

The training-step counter is stored as the rank-0 f64 tensor ``meta.step``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import resolve_dtype

MAGIC = b"BNETCKPT"
VERSION = 1
STEP_KEY = "meta.step"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    step: int = 0
    version: int = VERSION

    @property
    def dtype(self):
        kinds = {np.dtype(v.dtype) for v in self.tensors.values()}
        if len(kinds) != 1:
            raise CheckpointError(f"mixed tensor dtypes {sorted(map(str, kinds))}")
        return kinds.pop()


def to_bytes(ckpt: Checkpoint) -> bytes:
    items = dict(ckpt.tensors)
    items[STEP_KEY] = np.array(float(ckpt.step))
    out = [MAGIC, struct.pack("<II", ckpt.version, len(items))]
    for name, arr in items.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        enc = name.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise CheckpointError(f"{name}: name too long")
        out.append(struct.pack("<H", len(enc)) + enc)
        out.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(out)


def from_bytes(raw: bytes, dtype=None) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("bad magic: not a BNET checkpoint")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint at byte offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    tensors = {}
    step = 0
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code} at byte offset {pos - 2}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(size * dt.itemsize), dtype=dt).reshape(dims)
        arr = arr.astype(dt.newbyteorder("="))
        if name == STEP_KEY:
            step = int(arr)
        else:
            tensors[name] = arr
    if pos != len(raw):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    ckpt = Checkpoint(tensors, step, version)
    if dtype is not None and tensors:
        want = resolve_dtype(dtype)
        for name, arr in tensors.items():
            if arr.dtype != want:
                raise CheckpointError(f"{name}: stored as {arr.dtype}, expected {want}")
    return ckpt


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path, dtype=None) -> Checkpoint:
    """Read a checkpoint; with ``dtype`` set, tensors of another dtype are rejected."""
    return from_bytes(Path(path).read_bytes(), dtype)
