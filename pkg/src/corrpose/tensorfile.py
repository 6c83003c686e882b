"""EPTF raw tensor container.

Layout (little-endian): ``b"EPTF"``, version ``u16``, dtype code ``u8``
(0 = u8, 1 = u16, 2 = f32), ``ndim`` ``u8``, ``ndim`` dims as ``u32``, then
the row-major payload. Maps with values in ``[0, 1]`` may be stored as u16
scaled by 65535.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"EPTF"
VERSION = 1
DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}
CODES = {"u8": 0, "u16": 1, "f32": 2}
UNIT_SCALE = 65535.0


def encode(array: np.ndarray, dtype: str | None = None) -> bytes:
    a = np.asarray(array)
    if dtype is None:
        dtype = {np.dtype("uint8"): "u8", np.dtype("uint16"): "u16"}.get(a.dtype, "f32")
    if dtype not in CODES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    code = CODES[dtype]
    if a.ndim > 255:
        raise FormatError("too many dimensions")
    if dtype != "f32" and a.dtype.kind == "f":
        raise FormatError("float data needs explicit quantization before an integer dtype")
    payload = np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()
    header = MAGIC + struct.pack("<HBB", VERSION, code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + payload


def decode(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("not an EPTF tensor")
    version, code, ndim = struct.unpack_from("<HBB", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported EPTF version {version}")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 8 + 4 * ndim
    if len(data) < off:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    dt = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(data) - off != expected:
        raise FormatError(f"payload has {len(data) - off} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dt, offset=off).reshape(dims).copy()


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temporary file in the target directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_tensor(path, array: np.ndarray, dtype: str | None = None) -> None:
    atomic_write(path, encode(array, dtype))


def read_tensor(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def quantize_unit(a: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(a, 0.0, 1.0) * UNIT_SCALE).astype(np.uint16)


def read_unit_map(path) -> np.ndarray:
    """Float map from f32 or unit-quantized u16 storage."""
    a = read_tensor(path)
    if a.dtype == np.uint16:
        return a.astype(np.float64) / UNIT_SCALE
    return a.astype(np.float64)
