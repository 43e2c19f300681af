"""Bit-exact binary checkpoints.

Layout: magic ``MSN1`` | format version u16 LE | tensor count u32 LE | per
tensor: name length u16 LE, UTF-8 name, dtype code u8 (0 = f32, 1 = f64),
rank u8, extents as u32 LE each, raw values little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSN1"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(RuntimeError):
    """Malformed checkpoint file."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class DuplicateTensorError(CheckpointError):
    pass


def write_tensors(path, tensors: dict) -> None:
    """Serialize name -> float array, sorted by name for byte stability."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype not in _DTYPE_CODES:
                raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
            if not (1 <= arr.ndim <= 4):
                raise ValueError(f"{name}: rank {arr.ndim} outside 1..4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    raw = fh.read(count)
    if len(raw) != count:
        raise TruncatedError(f"checkpoint truncated while reading {what}")
    return raw


def read_tensors(path) -> dict:
    path = Path(path)
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != VERSION:
            raise VersionMismatchError(f"format version {version}, expected {VERSION}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            if name in tensors:
                raise DuplicateTensorError(f"duplicate tensor name {name!r}")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2, "dtype/rank"))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            if not (1 <= rank <= 4):
                raise CheckpointError(f"{name}: rank {rank} outside 1..4")
            extents = struct.unpack(
                "<" + "I" * rank, _read_exact(fh, 4 * rank, "extents"))
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(extents)) * dtype.itemsize
            raw = _read_exact(fh, nbytes, f"values of {name}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(extents)
            tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        if fh.read(1):
            raise CheckpointError("trailing bytes after final tensor")
    return tensors
