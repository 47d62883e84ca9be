"""Reader and writer for GLFT tensor files (see docs/tensor-format.md)."""

import json
import struct

import numpy as np

MAGIC = b"GLFT"
VERSION = 1
DTYPE_F32_LE = 0


def write(path, array, meta=None):
    array = np.ascontiguousarray(array, dtype="<f4")
    meta_bytes = json.dumps(meta or {}, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HBB", VERSION, DTYPE_F32_LE, array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(array.tobytes())


def read(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}")
    version, dtype, rank = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32_LE:
        raise ValueError(f"{path}: unknown dtype {dtype}")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    pos = 8 + 4 * rank
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos : pos + meta_len] or b"{}")
    pos += meta_len
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - pos != 4 * count:
        raise ValueError(f"{path}: payload at byte {pos} has {len(buf) - pos} bytes, need {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", offset=pos).reshape(dims)
    return data, meta
