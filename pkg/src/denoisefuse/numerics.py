"""Dense linear algebra helpers, seeded Gaussian sampling and the DNFM matrix format.

Matrices and vectors are plain float64 numpy arrays; the helpers here only add
the shape/finiteness checks and the binary layout the rest of the package relies on.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO, Sequence

import numpy as np

from .exceptions import CorruptFileError, ShapeError, VersionMismatchError

DNFM_MAGIC = b"DNFM"
DNFM_VERSION = 1
_DNFM_HEADER = struct.Struct("<4sHIIB")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_TAGS = {"f64": 0, "f32": 1}


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Return ``data`` as a finite 2-D float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_vector(data, name: str = "vector") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Accepts 1-D right operands (matrix-vector product).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


class Rng:
    """Counter-based (Philox) Gaussian stream that can be split into independent children.

    Children are keyed by their position in the split tree, so a child stream
    does not depend on how many draws the parent has made.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(_path)
        self._nsplit = 0
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, n: int) -> list["Rng"]:
        children = [Rng(self.seed, self.path + (self._nsplit + k,)) for k in range(n)]
        self._nsplit += n
        return children

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def gaussian(rng: Rng, dim: int) -> np.ndarray:
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    return rng.standard_normal(dim)


def write_matrix(fh: BinaryIO, arr: np.ndarray, dtype: str = "f64") -> None:
    """Write one DNFM blob. 1-D arrays are stored as a single row."""
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"DNFM stores 2-D data, got shape {arr.shape}")
    tag = _DTYPE_TAGS[dtype]
    fh.write(_DNFM_HEADER.pack(DNFM_MAGIC, DNFM_VERSION, arr.shape[0], arr.shape[1], tag))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def read_matrix(fh: BinaryIO) -> np.ndarray:
    """Read one DNFM blob, always returning float64."""
    head = fh.read(_DNFM_HEADER.size)
    if len(head) != _DNFM_HEADER.size:
        raise CorruptFileError("truncated DNFM header")
    magic, version, rows, cols, tag = _DNFM_HEADER.unpack(head)
    if magic != DNFM_MAGIC:
        raise VersionMismatchError(f"bad DNFM magic {magic!r}")
    if version != DNFM_VERSION:
        raise VersionMismatchError(f"unsupported DNFM version {version}")
    if tag not in _DTYPES:
        raise CorruptFileError(f"unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    nbytes = rows * cols * dt.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise CorruptFileError(f"truncated DNFM payload: expected {nbytes} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dt).astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise CorruptFileError("DNFM payload contains non-finite values")
    return arr


def save_matrices(path, arrays: Sequence[np.ndarray], dtype: str = "f64") -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_matrix(fh, arr, dtype)


def load_matrices(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    size = len(buf.getbuffer())
    out = []
    while buf.tell() < size:
        out.append(read_matrix(buf))
    return out
