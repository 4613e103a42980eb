"""Bit-exact binary checkpoint format.

Layout (all little-endian):
    magic  b"DW0C"
    version      u32
    tensor count u32
    per tensor:  name length u16, UTF-8 name, dtype code u8 (0 = f32),
                 rank u8, dims u32 each, raw values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DW0C"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors; values are stored as little-endian float32."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name[:32]!r}...")
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", DTYPE_F32, a.ndim))
            for d in a.shape:
                fh.write(struct.pack("<I", d))
            fh.write(a.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    off = 4
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        dtype_code, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        if dtype_code != DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype code {dtype_code} for {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.copy()
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return out
