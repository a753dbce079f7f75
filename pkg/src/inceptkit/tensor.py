"""Dense tensor helpers shared by every other module.

Tensors are plain numpy arrays in batch x height x width x channels order.
This module only adds the pieces numpy leaves open: validated shapes,
seeded initialisation, strict (non-broadcasting) elementwise ops and a
deterministic random stream.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

_MAX_ELEMENTS = 2**63 - 1

PRECISIONS = {"f32": np.float32, "f64": np.float64}


def check_shape(dims: Sequence[int]) -> tuple[int, ...]:
    """Validate ``dims`` and return it as a tuple of ints."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 1:
        raise ValueError("shape must have rank >= 1")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dims must be >= 1, got {dims}")
    if math.prod(dims) > _MAX_ELEMENTS:
        raise OverflowError(f"element count of {dims} overflows a 64-bit index")
    return dims


def as_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        return np.dtype(PRECISIONS[precision])
    dtype = np.dtype(precision)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    return dtype


class Prng:
    """Seeded random stream backed by numpy's Philox4x64 counter-based generator.

    Philox output depends only on (key, counter), so the sequence for a given
    seed is identical on every platform numpy supports. ``stream(i)`` derives
    an independent generator, used to keep e.g. data shuffling separate from
    weight initialisation.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id])
        self.generator = np.random.Generator(np.random.Philox(ss))

    def stream(self, stream_id: int) -> "Prng":
        return Prng(self.seed, stream_id)

    def normal(self, shape, mean=0.0, std=1.0, dtype=np.float64) -> np.ndarray:
        if std < 0:
            raise ValueError("std must be non-negative")
        out = self.generator.standard_normal(check_shape(shape))
        return (out * std + mean).astype(dtype, copy=False)

    def truncated_normal(self, shape, std: float, bound: float = 2.0, dtype=np.float64) -> np.ndarray:
        """Zero-mean normal draws with every value inside ``bound`` standard deviations."""
        if std < 0:
            raise ValueError("std must be non-negative")
        z = self.generator.standard_normal(check_shape(shape))
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self.generator.standard_normal(int(bad.sum()))
            bad = np.abs(z) > bound
        return (z * std).astype(dtype, copy=False)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=check_shape(shape))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)


def make_tensor(shape, init="zeros", value: float = 0.0, mean: float = 0.0, std: float = 1.0,
                prng: Prng | None = None, precision="f64") -> np.ndarray:
    """Allocate a tensor filled by ``init`` in {"zeros", "ones", "constant", "gaussian"}."""
    shape = check_shape(shape)
    dtype = as_dtype(precision)
    if init == "zeros":
        return np.zeros(shape, dtype)
    if init == "ones":
        return np.ones(shape, dtype)
    if init == "constant":
        return np.full(shape, value, dtype)
    if init == "gaussian":
        if prng is None:
            raise ValueError("gaussian init needs a Prng")
        return prng.normal(shape, mean, std, dtype)
    raise ValueError(f"unknown init {init!r}")


_ZIP_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def map_zip(a: np.ndarray, b, op: str) -> np.ndarray:
    """Elementwise ``op`` over equal-shaped tensors; ``b`` may also be a scalar."""
    fn = _ZIP_OPS[op]
    a = np.asarray(a)
    if np.ndim(b) == 0:
        return fn(a, np.asarray(b, a.dtype))
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return fn(a, b)


def reduce(t: np.ndarray, axes=None, kind: str = "sum") -> np.ndarray:
    """Reduce over ``axes`` (all axes when None); reduced axes are dropped."""
    t = np.asarray(t)
    if axes is None:
        axes = tuple(range(t.ndim))
    axes = tuple(int(a) for a in axes)
    norm = []
    for a in axes:
        if not -t.ndim <= a < t.ndim:
            raise ValueError(f"axis {a} out of range for rank {t.ndim}")
        norm.append(a % t.ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"duplicate axes {axes}")
    fn = {"sum": np.sum, "mean": np.mean, "max": np.max}[kind]
    return fn(t, axis=tuple(sorted(norm)))


def all_finite(t: np.ndarray) -> bool:
    return bool(np.isfinite(t).all())
