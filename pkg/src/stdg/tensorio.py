"""Binary tensor files.

Layout: ``b"STDG"``, version byte ``0x01``, dtype byte (``0x01`` f64,
``0x02`` f32), rank byte, ``rank`` little-endian u32 extents, then the
row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"STDG"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_CODES = {"f64": 1, "f32": 2}


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr, dtype: str = "f64") -> bytes:
    code = _CODES[dtype]
    a = np.asarray(arr, dtype=_DTYPES[code])  # ascontiguousarray would promote rank 0 to rank 1
    if a.ndim > 255:
        raise TensorFormatError("rank too large")
    head = MAGIC + bytes([VERSION, code, a.ndim]) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise TensorFormatError("missing tensor magic")
    version, code, rank = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype byte {code:#x}")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated header")
    shape = struct.unpack(f"<{rank}I", buf[7:off])
    dt = _DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + n * dt.itemsize:
        raise TensorFormatError(f"payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape).astype(np.float64)


def save_tensor(path, arr, dtype: str = "f64") -> None:
    Path(path).write_bytes(encode_tensor(arr, dtype))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
