"""Minimal binary tensor container used for fields, masks and network weights.

Layout: magic b"SART", version u8, dtype code u8, rank u8, then one u32
little-endian per dimension, then the row-major payload (little-endian).
Dtype codes: 0 = uint8, 1 = float32.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractViolation, require

MAGIC = b"SART"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}
_CODES_BY_KIND = {"u": 0, "i": 0, "b": 0, "f": 1}


def _code_for(arr: np.ndarray) -> int:
    kind = arr.dtype.kind
    require(kind in _CODES_BY_KIND, f"unsupported dtype {arr.dtype}")
    return _CODES_BY_KIND[kind]


def write_tensor(path, arr: np.ndarray) -> None:
    """Write an array; float data is stored as float32, integer/bool as uint8."""
    arr = np.ascontiguousarray(arr)
    code = _code_for(arr)
    arr = arr.astype(_DTYPE_CODES[code])
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContractViolation(f"{path}: bad magic {magic!r}")
        version, code, rank = struct.unpack("<BBB", fh.read(3))
        if version != VERSION:
            raise ContractViolation(f"{path}: unsupported version {version}")
        if code not in _DTYPE_CODES:
            raise ContractViolation(f"{path}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(dims)) if rank else 1
        payload = fh.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise ContractViolation(f"{path}: truncated payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.copy()
