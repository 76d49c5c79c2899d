"""Deterministic binary container for named tensors plus JSON metadata.

Layout (all integers little-endian):

    magic   b"UMCK1"
    u32     metadata length in bytes, then that many bytes of UTF-8 JSON
    u32     tensor count
    per tensor, in the order given:
        u16     name length, then UTF-8 name
        u8      dtype code (0 = float64, 1 = float32)
        u8      ndim
        u32*    dims
        raw     row-major little-endian payload

Writing the same tensors (and metadata) twice yields byte-identical files;
metadata keys are sorted when serialised.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UMCK1"
_DTYPE_CODES = {0: "<f8", 1: "<f4"}


class CheckpointError(ValueError):
    """Malformed container or incompatible contents."""


class CompatibilityError(ValueError):
    """Checkpoint exists but cannot drive this model (CLI exit code 4)."""


def save_checkpoint(path, tensors: dict, metadata: dict | None = None) -> None:
    """tensors maps name -> ndarray; insertion order is preserved on disk."""
    blob = json.dumps(metadata or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float64:
            code, wire = 0, "<f8"
        elif arr.dtype == np.float32:
            code, wire = 1, "<f4"
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=wire).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Returns (tensors dict, metadata dict)."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (meta_len,) = take("<I")
    metadata = json.loads(raw[off:off + meta_len].decode())
    off += meta_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = raw[off:off + name_len].decode()
        off += name_len
        code, ndim = take("<BB")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        shape = take(f"<{ndim}I")
        dtype = np.dtype(_DTYPE_CODES[code])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off)
        off += n * dtype.itemsize
        tensors[name] = arr.reshape(shape).astype(dtype.base, copy=True)
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return tensors, metadata
