"""Binary checkpoint format for named parameter sets.

Layout (all integers little-endian unsigned 32-bit unless noted):

    magic   4 bytes  b"MSKC"
    version u32      1
    count   u32      number of parameters
    then per parameter:
        name_len u32
        name     utf-8 bytes
        rank     u32
        dims     u32 * rank
        payload  float32 little-endian, C order, prod(dims) values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ValidationError

MAGIC = b"MSKC"
VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray]):
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValidationError(f"not a checkpoint file: {path}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(dims)
        offset += 4 * n
        out[name] = arr.astype(np.float32).copy()
    if offset != len(raw):
        raise ValidationError(f"trailing bytes in checkpoint: {path}")
    return out
