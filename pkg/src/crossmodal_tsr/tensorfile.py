"""Bit-exact binary container for 2-d float32 feature matrices.

Layout, all little-endian:
    magic   4 bytes  "TSRE"
    version u16      1
    dtype   u8       0 (float32)
    reserved u8      0
    rows    u32
    cols    u32
    payload rows*cols float32, row-major
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataIOError, FormatError

MAGIC = b"TSRE"
VERSION = 1
_HEADER = struct.Struct("<4sHBBII")


def write_matrix(path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise FormatError(f"embedding files hold 2-d matrices, got shape {matrix.shape}")
    rows, cols = matrix.shape
    if rows < 1 or cols < 1:
        raise FormatError(f"embedding files need positive extents, got {rows}x{cols}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, 0, rows, cols))
        fh.write(matrix.tobytes())


def read_matrix(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            header = fh.read(_HEADER.size)
            if len(header) < _HEADER.size:
                raise DataIOError(f"{path}: truncated header")
            magic, version, dtype, _reserved, rows, cols = _HEADER.unpack(header)
            if magic != MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}")
            if version != VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
            if dtype != 0:
                raise FormatError(f"{path}: unsupported dtype code {dtype}")
            if rows < 1 or cols < 1:
                raise FormatError(f"{path}: empty matrix ({rows}x{cols}) rejected")
            payload = fh.read(rows * cols * 4)
    except OSError as exc:
        if isinstance(exc, DataIOError):
            raise
        raise DataIOError(f"{path}: {exc}") from exc
    if len(payload) < rows * cols * 4:
        raise DataIOError(
            f"{path}: truncated payload, expected {rows * cols * 4} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
