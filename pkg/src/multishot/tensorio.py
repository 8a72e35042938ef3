"""Binary container for lists of dense arrays.

Layout (all integers little-endian)::

    magic      8 bytes   b"MSHTNSR\\0"
    version    u32       currently 1
    reserved   u32       zero
    count      u32       number of tensors
    per tensor:
        dtype  u32       1 = float32, 2 = float64
        rank   u32
        extents rank x u64
        payload          row-major, little-endian, declared precision

Reading and writing are bit-exact.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import LoadError

MAGIC = b"MSHTNSR\x00"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<")
    try:
        return _DTYPE_CODES[dt]
    except KeyError:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}; use float32 or float64") from None


def write_tensors(stream: BinaryIO, tensors: Iterable[np.ndarray]) -> None:
    tensors = [np.asarray(t) for t in tensors]
    stream.write(MAGIC)
    stream.write(struct.pack("<II", VERSION, 0))
    stream.write(struct.pack("<I", len(tensors)))
    for t in tensors:
        code = _dtype_code(t)
        stream.write(struct.pack("<II", code, t.ndim))
        stream.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        stream.write(np.ascontiguousarray(t, dtype=_CODE_DTYPES[code]).tobytes(order="C"))


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise LoadError(f"truncated tensor file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensors(stream: BinaryIO) -> list[np.ndarray]:
    magic = _read_exact(stream, 8)
    if magic != MAGIC:
        raise LoadError(f"bad tensor file magic {magic!r}")
    version, _ = struct.unpack("<II", _read_exact(stream, 8))
    if version != VERSION:
        raise LoadError(f"unsupported tensor file version {version}")
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    out = []
    for i in range(count):
        code, rank = struct.unpack("<II", _read_exact(stream, 8))
        if code not in _CODE_DTYPES:
            raise LoadError(f"tensor {i}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(_read_exact(stream, nbytes), dtype=dtype).reshape(shape)
        out.append(data.astype(dtype.newbyteorder("="), copy=True))
    if stream.read(1):
        raise LoadError("trailing bytes after last tensor")
    return out


def dumps(tensors: Sequence[np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    return buf.getvalue()


def loads(data: bytes) -> list[np.ndarray]:
    return read_tensors(io.BytesIO(data))


def save(path: str | os.PathLike, tensors: Sequence[np.ndarray]) -> None:
    atomic_write_bytes(path, dumps(tensors))


def load(path: str | os.PathLike) -> list[np.ndarray]:
    with open(path, "rb") as f:
        return read_tensors(f)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to ``path`` via a sibling temp file and rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
