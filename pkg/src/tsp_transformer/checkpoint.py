"""Binary container for named arrays.

Layout (all integers little-endian)::

    b"TSPTCKPT"  u32 version  u32 entry_count
    per entry:   u32 name_len  name (UTF-8)  u8 dtype_code  u8 ndim
                 ndim * u64 shape  payload (raw little-endian)

Entries are written in sorted name order, so saving the same content twice is
byte-identical.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSPTCKPT"
VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<u8"): 4,
    np.dtype("u1"): 5,
    np.dtype("bool"): 6,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dtype not in DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_CODES[dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict:
    view = memoryview(blob)
    pos = 0

    def take(size: int, what: str):
        nonlocal pos
        if pos + size > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        out = view[pos : pos + size]
        pos += size
        return out

    magic = bytes(take(len(MAGIC), "magic"))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic: found {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version: found {version}, expected {VERSION}")
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"{name} header"))
        if code not in CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for entry {name!r}")
        dtype = CODE_DTYPES[code]
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"{name} shape"))
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(bytes(take(size, f"{name} payload")), dtype=dtype).reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last entry")
    return arrays


def save(arrays: dict, path) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> dict:
    return loads(Path(path).read_bytes())
