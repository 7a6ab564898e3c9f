"""Binary containers: STSR for one tensor, STAR for a named collection.

STSR layout (little endian)::

    0..3   b"STSR"
    4      version (1)
    5      dtype code (0 float32, 1 float64)
    6      ndim (always 5)
    7      reserved (0)
    8..47  five u64 extents
    48..   row-major payload

STAR layout: b"STAR", u8 version, u32 entry count, then per entry a u16
name length, the UTF-8 name and an embedded STSR blob.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .tensor import check_shape

STSR_MAGIC = b"STSR"
STAR_MAGIC = b"STAR"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sBBBB5Q")


class CorruptFileError(ValueError):
    """A tensor or checkpoint blob failed validation."""


def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    shape = check_shape(x.shape)
    dt = x.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TypeError(f"STSR stores float32 or float64, not {x.dtype}")
    header = _HEADER.pack(STSR_MAGIC, VERSION, _DTYPE_CODES[dt], 5, 0, *shape)
    return header + np.ascontiguousarray(x, dtype=dt).tobytes()


def decode_tensor(buf, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one STSR blob at ``offset``; return the array and the end offset."""
    if len(buf) - offset < _HEADER.size:
        raise CorruptFileError("truncated STSR header")
    magic, version, code, ndim, _, *shape = _HEADER.unpack_from(buf, offset)
    if magic != STSR_MAGIC:
        raise CorruptFileError(f"bad STSR magic {magic!r}")
    if version != VERSION:
        raise CorruptFileError(f"unsupported STSR version {version}")
    if code not in _CODE_DTYPES:
        raise CorruptFileError(f"unknown STSR dtype code {code}")
    if ndim != 5:
        raise CorruptFileError(f"STSR ndim must be 5, got {ndim}")
    try:
        shape = check_shape(shape)
    except (ValueError, OverflowError) as exc:
        raise CorruptFileError(f"bad STSR extents: {exc}") from None
    dtype = _CODE_DTYPES[code]
    start = offset + _HEADER.size
    end = start + int(np.prod(shape)) * dtype.itemsize
    if end > len(buf):
        raise CorruptFileError(f"truncated STSR payload: need {end - start} bytes, have {len(buf) - start}")
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=start)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True), end


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_tensor(path, x: np.ndarray) -> None:
    _atomic_write(path, encode_tensor(x))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise CorruptFileError(f"{path}: {len(buf) - end} trailing bytes after STSR payload")
    return arr


def encode_archive(entries) -> bytes:
    """Serialize an ordered mapping (or pair sequence) of name -> tensor."""
    items = list(entries.items() if hasattr(entries, "items") else entries)
    parts = [STAR_MAGIC, struct.pack("<BI", VERSION, len(items))]
    seen = set()
    for name, arr in items:
        if name in seen:
            raise ValueError(f"duplicate archive entry {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(encode_tensor(arr))
    return b"".join(parts)


def decode_archive(buf) -> dict[str, np.ndarray]:
    if len(buf) < 9:
        raise CorruptFileError("truncated STAR header")
    if buf[:4] != STAR_MAGIC:
        raise CorruptFileError(f"bad STAR magic {bytes(buf[:4])!r}")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise CorruptFileError(f"unsupported STAR version {version}")
    pos = 9
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        if pos + 2 > len(buf):
            raise CorruptFileError(f"truncated STAR entry {i}")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n > len(buf):
            raise CorruptFileError(f"truncated STAR entry name {i}")
        try:
            name = bytes(buf[pos:pos + n]).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFileError(f"entry {i} name is not UTF-8") from None
        pos += n
        if name in out:
            raise CorruptFileError(f"duplicate STAR entry {name!r}")
        out[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise CorruptFileError(f"{len(buf) - pos} trailing bytes after STAR entries")
    return out


def write_archive(path, entries) -> None:
    _atomic_write(path, encode_archive(entries))


def read_archive(path) -> dict[str, np.ndarray]:
    return decode_archive(Path(path).read_bytes())
