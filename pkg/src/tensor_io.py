"""
Flat binary tensor records (`.rmt`).

Layout: a 32-byte little-endian header -- magic b"RMTD", uint16 version,
uint8 dtype code, uint8 rank, six uint32 dims (unused dims are 0) -- followed
by the row-major little-endian payload.
"""
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .config import CorruptFileError

MAGIC = b"RMTD"
VERSION = 1
MAX_RANK = 6
HEADER = struct.Struct("<4sHBB6I")

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i4"),
    4: np.dtype("u1"),
    5: np.dtype("<i8"),
}
CODE_FOR_DTYPE = {dtype.newbyteorder("="): code for code, dtype in DTYPE_CODES.items()}


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = CODE_FOR_DTYPE.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"Unsupported tensor dtype {array.dtype}. Supported: float32, float64, int32, uint8, int64.")
    if array.ndim > MAX_RANK:
        raise ValueError(f"Tensor rank {array.ndim} exceeds the maximum of {MAX_RANK}.")
    dims = list(array.shape) + [0] * (MAX_RANK - array.ndim)
    fh.write(HEADER.pack(MAGIC, VERSION, code, array.ndim, *dims))
    fh.write(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())


def read_tensor(fh: BinaryIO, source: str = "<stream>") -> np.ndarray:
    header = fh.read(HEADER.size)
    if len(header) != HEADER.size:
        raise CorruptFileError(f"{source}: truncated tensor header ({len(header)} of {HEADER.size} bytes).")
    magic, version, code, rank, *dims = HEADER.unpack(header)
    if magic != MAGIC:
        raise CorruptFileError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}.")
    if version != VERSION:
        raise CorruptFileError(f"{source}: unsupported tensor format version {version}.")
    if code not in DTYPE_CODES:
        raise CorruptFileError(f"{source}: unknown dtype code {code}.")
    if rank > MAX_RANK:
        raise CorruptFileError(f"{source}: rank {rank} exceeds {MAX_RANK}.")
    shape = tuple(dims[:rank])
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise CorruptFileError(f"{source}: truncated payload ({len(payload)} of {nbytes} bytes).")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Tensor file not found: {path}")
    with open(path, "rb") as f:
        array = read_tensor(f, str(path))
        if f.read(1):
            raise CorruptFileError(f"{path}: trailing bytes after tensor payload.")
    return array
