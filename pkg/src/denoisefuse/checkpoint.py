"""Checkpoint container: a JSON header followed by DNFM blobs in a fixed order.

Layout (little-endian)::

    b"DNCK" | u16 version | u32 header_len | header JSON (utf-8) | DNFM blob * header["n_blobs"]
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct

import numpy as np

from .exceptions import CorruptFileError, VersionMismatchError
from .numerics import read_matrix, write_matrix

MAGIC = b"DNCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def to_bytes(header: dict, arrays, dtype: str = "f64") -> bytes:
    header = dict(header, n_blobs=len(arrays), dtype=dtype)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
    buf.write(head)
    for arr in arrays:
        write_matrix(buf, arr, dtype)
    return buf.getvalue()


def from_bytes(data: bytes) -> tuple[dict, list[np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise CorruptFileError("file too short for checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise VersionMismatchError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CorruptFileError("truncated checkpoint header")
    try:
        header = json.loads(data[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable checkpoint header: {exc}") from exc
    buf = io.BytesIO(data[start + hlen:])
    arrays = [read_matrix(buf) for _ in range(int(header.get("n_blobs", 0)))]
    if buf.read(1):
        raise CorruptFileError("trailing bytes after last blob")
    return header, arrays


def write(path, header: dict, arrays, dtype: str = "f64") -> None:
    # write-then-rename so a failed run never leaves a half-written checkpoint
    data = to_bytes(header, arrays, dtype)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read(path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def array_digest(arrays) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]
