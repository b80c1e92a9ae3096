"""``XAVF`` raw-tensor container.

Layout (little-endian)::

    b"XAVF" | version u8 | dtype code u8 | rank u8 | dims u64 * rank
    | config hash (32 bytes) | row-major payload | sha256(payload) (32 bytes)
"""
from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XAVF"
VERSION = 1
DTYPES = {1: np.float32, 2: np.float64, 3: np.uint8, 4: np.int64}
CODES = {np.dtype(v): k for k, v in DTYPES.items()}


class XAVFError(ValueError):
    pass


def encode(array: np.ndarray, config_hash: bytes) -> bytes:
    a = np.asarray(array, order="C")  # ascontiguousarray would promote 0-d to 1-d
    if a.dtype not in CODES:
        raise XAVFError(f"unsupported dtype {a.dtype}")
    if len(config_hash) != 32:
        raise XAVFError("config hash must be 32 bytes")
    if a.ndim > 255:
        raise XAVFError("rank too large")
    a = a.astype(a.dtype.newbyteorder("<"), copy=False)
    payload = a.tobytes(order="C")
    head = MAGIC + struct.pack("<BBB", VERSION, CODES[np.dtype(array.dtype)], a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape) + bytes(config_hash)
    return head + payload + hashlib.sha256(payload).digest()


def decode(buf: bytes, expect_hash: bytes | None = None):
    """Return ``(array, config_hash)``; validates hash, length and checksum."""
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise XAVFError("not an XAVF file")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise XAVFError(f"unsupported XAVF version {version}")
    if code not in DTYPES:
        raise XAVFError(f"unknown dtype code {code}")
    off = 7
    if len(buf) < off + 8 * rank + 32:
        raise XAVFError("truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    chash = bytes(buf[off:off + 32])
    off += 32
    if expect_hash is not None and chash != expect_hash:
        raise XAVFError("config hash mismatch")
    dt = np.dtype(DTYPES[code]).newbyteorder("<")
    n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off - 32 != n:
        raise XAVFError(f"payload length {len(buf) - off - 32} != {n} implied by dims {dims}")
    payload = buf[off:off + n]
    if hashlib.sha256(payload).digest() != bytes(buf[off + n:]):
        raise XAVFError("payload checksum mismatch")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims).astype(DTYPES[code])
    return arr, chash


def write(path, array: np.ndarray, config_hash: bytes, overwrite: bool = False) -> Path:
    """Write exclusively; an existing file is an error unless ``overwrite``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(array, config_hash)
    if overwrite:
        path.write_bytes(data)
        return path
    tmp = path.with_suffix(path.suffix + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    try:
        os.link(tmp, path)  # atomic create-if-absent
    except FileExistsError:
        raise XAVFError(f"{path} already exists") from None
    finally:
        tmp.unlink()
    return path


def read(path, expect_hash: bytes | None = None):
    return decode(Path(path).read_bytes(), expect_hash)
