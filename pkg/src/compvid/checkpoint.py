"""Flat checkpoint archive.

Layout (all integers little-endian)::

    magic  b"CVCK"
    u32    format version
    u32    metadata length, then that many bytes of UTF-8 JSON
    u32    entry count
    per entry:
        u16 path length, path (UTF-8)
        u8  dtype code (0 = float32, 1 = float64, 2 = int64)
        u8  ndim, then ndim x u32 extents
        payload: little-endian scalars, C order
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CVCK"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    mb = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    buf.write(struct.pack("<I", len(arrays)))
    for path in sorted(arrays):
        arr = np.asarray(arrays[path])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"{path}: unsupported dtype {arr.dtype}")
        pb = path.encode()
        buf.write(struct.pack("<H", len(pb)))
        buf.write(pb)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        return _loads(memoryview(blob))
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint archive: {exc}") from exc


def _loads(view: memoryview) -> tuple[dict[str, np.ndarray], dict]:
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint archive (bad magic)")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", view, 8)
    off = 12
    meta = json.loads(bytes(view[off:off + mlen]).decode())
    off += mlen
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (plen,) = struct.unpack_from("<H", view, off)
        off += 2
        path = bytes(view[off:off + plen]).decode()
        off += plen
        code, ndim = struct.unpack_from("<BB", view, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        n = int(np.prod(shape)) * dt.itemsize
        if off + n > len(view):
            raise CheckpointError(f"truncated payload for {path}")
        arrays[path] = np.frombuffer(view[off:off + n], dtype=dt).reshape(shape).copy()
        off += n
    return arrays, meta


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return loads(p.read_bytes())
