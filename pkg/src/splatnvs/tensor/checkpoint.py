"""Binary checkpoint container.

Layout: magic "GPSG", u32 format version, u32 entry count, entry table
(name, dtype code, shape, u64 byte offset into the data section), then the
raw little-endian buffers. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GPSG"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_checkpoint(path, arrays: dict[str, np.ndarray]):
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for entry {name}")
        code = _CODES[arr.dtype]
        blob = arr.astype(_DTYPES[code], copy=False).tobytes()
        entries.append((name, code, arr.shape, offset))
        blobs.append(blob)
        offset += len(blob)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(entries)))
        for name, code, shape, off in entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(struct.pack("<Q", off))
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        (off,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        entries.append((name, code, shape, off))
    base = pos
    out = {}
    for name, code, shape, off in entries:
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(data, dtype=dt, count=n, offset=base + off).reshape(shape)
        out[name] = arr.copy()
    return out
