"""INCD image datasets and the synthetic shapes generator.

File layout (little-endian): b"INCD", H u16, W u16, count u32, then
``count`` records of label u16 followed by H*W*3 u8 RGB bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Prng

MAGIC = b"INCD"
_HEADER = struct.Struct("<4sHHI")
SHAPE_CLASSES = ("disk", "square", "triangle", "hbar", "vbar", "cross", "ring", "diagonal", "checker", "dots")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, 3] float in [-1, 1]
    labels: np.ndarray  # [N] int64

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @classmethod
    def from_uint8(cls, pixels: np.ndarray, labels) -> "Dataset":
        return cls(pixels.astype(np.float64) / 127.5 - 1.0, np.asarray(labels, np.int64))


def encode(pixels: np.ndarray, labels) -> bytes:
    pixels = np.asarray(pixels)
    labels = np.asarray(labels)
    if pixels.dtype != np.uint8 or pixels.ndim != 4 or pixels.shape[-1] != 3:
        raise DatasetError(f"pixels must be uint8 [N,H,W,3], got {pixels.dtype} {pixels.shape}")
    n, h, w, _ = pixels.shape
    if labels.shape != (n,) or (labels < 0).any() or (labels > 0xFFFF).any():
        raise DatasetError("labels must be N values in [0, 65535]")
    rec = np.zeros(n, dtype=[("label", "<u2"), ("pix", "u1", (h * w * 3,))])
    rec["label"] = labels
    rec["pix"] = pixels.reshape(n, -1)
    return _HEADER.pack(MAGIC, h, w, n) + rec.tobytes()


def decode(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Return (uint8 pixels [N,H,W,3], labels [N])."""
    if len(buf) < _HEADER.size:
        raise DatasetError(f"file too short for header ({len(buf)} bytes)")
    magic, h, w, n = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    rec_size = 2 + h * w * 3
    expected = _HEADER.size + n * rec_size
    if len(buf) != expected:
        raise DatasetError(f"size {len(buf)} disagrees with header ({n} records of {h}x{w} need {expected})")
    rec = np.frombuffer(buf, dtype=[("label", "<u2"), ("pix", "u1", (h * w * 3,))], count=n, offset=_HEADER.size)
    return rec["pix"].reshape(n, h, w, 3).copy(), rec["label"].astype(np.int64)


def save(path, pixels, labels) -> None:
    Path(path).write_bytes(encode(pixels, labels))


def load(path) -> Dataset:
    return Dataset.from_uint8(*decode(Path(path).read_bytes()))


# -- synthetic shapes -------------------------------------------------------------

def _mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    t = max(1.5, r / 3)
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (abs(dy) <= r * 0.85) & (abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (abs(dx) <= (dy + r) * 0.6)
    if kind == "hbar":
        return (abs(dy) <= t) & (abs(dx) <= r)
    if kind == "vbar":
        return (abs(dx) <= t) & (abs(dy) <= r)
    if kind == "cross":
        return ((abs(dy) <= t) & (abs(dx) <= r)) | ((abs(dx) <= t) & (abs(dy) <= r))
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= r - t)
    if kind == "diagonal":
        return (abs(dy - dx) <= t) & (abs(dy) <= r) & (abs(dx) <= r)
    if kind == "checker":
        inside = (abs(dy) <= r) & (abs(dx) <= r)
        cell = max(2, int(r // 2))
        return inside & (((yy // cell) + (xx // cell)) % 2 == 0)
    if kind == "dots":
        inside = (abs(dy) <= r) & (abs(dx) <= r)
        return inside & (np.mod(dy, 4) < 1.5) & (np.mod(dx, 4) < 1.5)
    raise ValueError(kind)


def synthetic_shapes(count: int = 256, size: int = 32, seed: int = 0, classes: int = 10):
    """Deterministic colored-shape images; returns (uint8 pixels, labels).

    Labels cycle through the classes so every class is equally represented.
    """
    if not 1 <= classes <= len(SHAPE_CLASSES):
        raise ValueError(f"classes must be in [1, {len(SHAPE_CLASSES)}]")
    prng = Prng(seed)
    labels = np.arange(count) % classes
    pixels = np.empty((count, size, size, 3), np.uint8)
    for i, y in enumerate(labels):
        bg = prng.uniform((3,), 0, 90)
        fg = prng.uniform((3,), 140, 255)
        r = prng.uniform((1,), size * 0.2, size * 0.35)[0]
        cy, cx = prng.uniform((2,), size * 0.35, size * 0.65)
        img = np.empty((size, size, 3))
        img[:] = bg
        img[_mask(SHAPE_CLASSES[y], size, cy, cx, float(r))] = fg
        img += prng.normal((size, size, 3), std=6.0)
        pixels[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return pixels, labels
