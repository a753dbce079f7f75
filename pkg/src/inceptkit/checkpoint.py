"""INCK checkpoints: named little-endian f32 tensors.

Layout: b"INCK", version u32, count u32, then per tensor: name length u16,
UTF-8 name, rank u8, dims u32 each, f32 data (C order).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"INCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r} cannot be stored")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise CheckpointError("bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor name at byte {pos - nlen} is not UTF-8") from e
        if name in out:
            raise CheckpointError(f"duplicate tensor {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return out


def save(path, tensors: dict) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def check_matches(tensors: dict, expected: dict) -> None:
    """Raise CheckpointError naming the first tensor whose name or shape differs."""
    for name in list(expected) + list(tensors):
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(np.shape(expected[name])):
            raise CheckpointError(f"tensor {name!r}: shape {tensors[name].shape} != {np.shape(expected[name])}")
