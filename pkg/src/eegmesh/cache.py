"""Binary tensor container used for the preprocessed-trial cache.

Layout (all integers little-endian):

    magic     8 bytes   b"EGMTENS\\0"
    version   uint32    currently 1
    ndim      uint32
    shape     ndim x uint32
    meta_len  uint32
    meta      meta_len bytes of UTF-8 JSON (labels, provenance, parameters)
    data      prod(shape) float32 values, C order
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EGMTENS\x00"
VERSION = 1


class CacheFormatError(ValueError):
    pass


def encode_tensor(array: np.ndarray, meta: dict | None = None) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<II", VERSION, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    head += struct.pack("<I", len(meta_bytes)) + meta_bytes
    return head + array.tobytes()


def decode_tensor(data: bytes) -> tuple[np.ndarray, dict]:
    if data[:8] != MAGIC:
        raise CacheFormatError("bad magic")
    version, ndim = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")
    pos = 16
    shape = struct.unpack_from(f"<{ndim}I", data, pos)
    pos += 4 * ndim
    (meta_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) - pos < 4 * count:
        raise CacheFormatError("tensor payload truncated")
    array = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
    return array.astype(np.float32), meta


def write_tensor(path: str | os.PathLike, array: np.ndarray, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_tensor(array, meta))
    os.replace(tmp, path)


def read_tensor(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    return decode_tensor(Path(path).read_bytes())


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
