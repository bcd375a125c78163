"""Checkpoint files.

Binary layout (little-endian): ``b"CKPT"``, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 rank, rank x u32 dims, float32 payload.
A JSON sidecar next to the binary (same stem, ``.json``) carries configuration.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CKPT"


class CheckpointError(ValueError):
    pass


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> Path:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    if config is not None:
        sidecar_path(path).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r} at offset 0")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise CheckpointError(f"{path}: truncated at offset {off}")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<H")
        if off + nlen > len(buf):
            raise CheckpointError(f"{path}: truncated name at offset {off}")
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        end = off + 4 * n
        if end > len(buf):
            raise CheckpointError(f"{path}: payload of {name!r} truncated at offset {off}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off = end
    config = None
    side = sidecar_path(path)
    if side.exists():
        config = json.loads(side.read_text())
    return tensors, config
