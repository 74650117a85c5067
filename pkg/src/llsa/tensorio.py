"""FMAT tensor files and seeded synthetic matrices.

An FMAT file is a 28-byte little-endian header followed by the row-major
payload::

    magic  b"FMAT"
    u32    version (1)
    u32    dtype   (0 = float32, 1 = float64)
    u64    rows
    u64    cols
"""

from __future__ import annotations

import os
import struct
from enum import Enum

import numpy as np

from .errors import FormatError, IoError, ShapeMismatch

MAGIC = b"FMAT"
VERSION = 1
_HEADER = struct.Struct("<4sIIQQ")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(path, x) -> None:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"FMAT stores 2-D matrices, got shape {x.shape}")
    if x.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {x.dtype}; use float32 or float64")
    code = _CODES[x.dtype]
    header = _HEADER.pack(MAGIC, VERSION, code, x.shape[0], x.shape[1])
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(x, dtype=_DTYPES[code]).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {os.fspath(path)}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {os.fspath(path)}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"{len(raw)} bytes is shorter than the FMAT header")
    magic, version, code, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported FMAT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    expected = rows * cols * dt.itemsize
    if len(raw) - _HEADER.size != expected:
        raise FormatError(
            f"payload is {len(raw) - _HEADER.size} bytes, header implies {expected}"
        )
    x = np.frombuffer(raw, dtype=dt, offset=_HEADER.size).reshape(rows, cols)
    return x.astype(dt.newbyteorder("="), copy=True)


class Distribution(str, Enum):
    STD_NORMAL = "std_normal"
    UNIFORM01 = "uniform01"


def _uniform(n: int, seed: int) -> np.ndarray:
    # Philox-4x64 raw words; the top 53 bits give a double in [0, 1)
    raw = np.random.Philox(seed).random_raw(n)
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53


def gen_random(rows: int, cols: int, seed: int,
               distribution: Distribution | str = Distribution.STD_NORMAL,
               dtype=np.float64) -> np.ndarray:
    """Deterministic matrix from a Philox-4x64 stream keyed by ``seed``.

    Uniform values are ``(word >> 11) * 2**-53``. Normal values use the
    Box-Muller transform on consecutive uniform pairs ``(u1, u2)``:
    ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` then ``... * sin(2 pi u2)``.
    """
    n = rows * cols
    dist = Distribution(distribution)
    if dist is Distribution.UNIFORM01:
        x = _uniform(n, seed)
    else:
        u = _uniform(2 * ((n + 1) // 2), seed).reshape(-1, 2)
        rad = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        ang = 2.0 * np.pi * u[:, 1]
        x = np.column_stack((rad * np.cos(ang), rad * np.sin(ang))).ravel()[:n]
    return x.reshape(rows, cols).astype(dtype)
