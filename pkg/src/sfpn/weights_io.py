"""Binary weight container ("SFPW").

Layout: magic ``SFPW``, u32 LE version, u32 LE record count; each record is
u32 LE name length, UTF-8 name, u8 dtype tag (0 = f32), u8 rank, rank x
u32 LE dims, then the raw little-endian payload.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SFPW"
VERSION = 1
_DTYPE_F32 = 0


def save_weights(path, arrays: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        blob += struct.pack("<I", len(name_b))
        blob += name_b
        blob += struct.pack("<BB", _DTYPE_F32, a.ndim)
        blob += struct.pack(f"<{a.ndim}I", *a.shape)
        blob += a.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_weights(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    off = 12
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        dtype_tag, rank = struct.unpack_from("<BB", data, off)
        off += 2
        if dtype_tag != _DTYPE_F32:
            raise ValueError(f"unknown dtype tag {dtype_tag} in record {name!r}")
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        arrays[name] = arr.copy()
    if off != len(data):
        raise ValueError(f"{len(data) - off} trailing bytes after last record")
    return arrays
