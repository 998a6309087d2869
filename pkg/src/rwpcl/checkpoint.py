"""Binary checkpoint format for named float32 tensors.

Layout (little-endian): magic "RWPC", format version u32, tensor count u32;
then per tensor (sorted by name): name length u16, name UTF-8 bytes,
rank u8, dims u32 each, values float32 row-major. Round-trips byte-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"RWPC"
VERSION = 1


def _as_array(value) -> np.ndarray:
    if not isinstance(value, np.ndarray):
        value = getattr(value, "data", value)  # unwrap Tensor
    return np.asarray(value, dtype=np.float32)


def save_checkpoint(path, tensors: dict) -> None:
    """Write named tensors (Tensor objects or arrays) to ``path``."""
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = _as_array(tensors[name])
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as name -> float32 array."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint file not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise InputError(f"not a checkpoint file (bad magic) : {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise InputError(f"unsupported checkpoint version {version} in {path}")
    (count,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            values = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).copy()
            offset += 4 * size
            tensors[name] = values.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise InputError(f"truncated or corrupt checkpoint: {path}") from exc
    if offset != len(blob):
        raise InputError(f"trailing bytes after checkpoint payload: {path}")
    return tensors
