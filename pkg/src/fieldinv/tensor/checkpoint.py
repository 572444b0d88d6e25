"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic   8 bytes  b"FINVCKPT"
    version u32
    meta    u32 length + UTF-8 JSON (config text, counters, rng state, ...)
    count   u32
    count x { u32 name_len, name bytes, u32 rank, rank x u64 dims,
              prod(dims) x f64 values }

Values are always stored as float64, which round-trips float32 data exactly.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FINVCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        value = np.asarray(value)
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    if pos + meta_len > len(view):
        raise CheckpointError("truncated metadata")
    try:
        meta = json.loads(bytes(view[pos:pos + meta_len]).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt metadata: {e}") from None
    pos += meta_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(view[pos:pos + name_len]).decode()
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 8 * n > len(view):
            raise CheckpointError(f"truncated values for {name}")
        tensors[name] = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(dims).copy()
        pos += 8 * n
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, meta


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write_bytes(path, dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
