"""EXGN multi-tensor container.

Layout (all integers little-endian)::

    b"EXGN" | version u32 | entry count u32
    per entry: name length u16 | utf-8 name | dtype u8 (0=f32, 1=u8) | rank u8
               | dims u64 * rank | raw payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EXGN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class FormatError(ValueError):
    """Malformed, truncated, or incompatible EXGN file."""


def encode(entries: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
        code = _CODES.get(np.dtype(arr.dtype.name))
        if code is None:
            raise TypeError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("bad magic: not an EXGN file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported EXGN version {version} (expected {VERSION})")
    off = 12
    out = {}

    def need(n):
        if off + n > len(buf):
            raise FormatError("truncated EXGN file")

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(nlen + 2)
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        if code not in _DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        need(8 * rank)
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
        off += nbytes
    if off != len(buf):
        raise FormatError("trailing bytes after last EXGN entry")
    return out


def save(path, entries: dict):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode(entries))


def load(path) -> dict:
    return decode(Path(path).read_bytes())
