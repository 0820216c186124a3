"""Dense tensors, a couple of checked linear-algebra helpers and the seeded RNG.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Nothing here mutates its inputs.

Random numbers come from numpy's PCG64 bit generator (PCG-XSL-RR 128/64),
seeded as ``PCG64(seed)``. Uniform doubles are produced by
``Generator.random`` which takes the top 53 bits of each 64-bit draw and
scales by 2**-53, so streams are bit-exact across platforms.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64

Tensor = np.ndarray


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class Rng:
    """Seeded, single-owner random stream."""

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def random(self, shape) -> Tensor:
        """Uniform draws on [0, 1)."""
        return self._gen.random(shape, dtype=DTYPE)

    def uniform(self, low: float, high: float, shape) -> Tensor:
        return low + (high - low) * self.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, stream: int) -> "Rng":
        """Independent child stream derived from this generator's seed."""
        # Mix with a 64-bit odd constant so child seeds never collide with
        # small user seeds.
        child = (self.seed * 0x9E3779B97F4A7C15 + stream + 1) % 2**64
        return Rng(child)


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def uniform_init(rng: Rng, shape, limit: float) -> Tensor:
    """I.i.d. draws from Uniform(-limit, +limit)."""
    if not limit > 0:
        raise ValueError(f"limit must be positive, got {limit}")
    return rng.uniform(-limit, limit, shape)


_REDUCERS = {"sum": np.sum, "mean": np.mean, "max": np.max}


def reduce(t: Tensor, op: str, axes=None) -> Tensor:
    """Reduce ``t`` over ``axes`` (all axes when None), keeping the rest in order."""
    if op not in _REDUCERS:
        raise ValueError(f"unknown reduction {op!r}")
    t = np.asarray(t, dtype=DTYPE)
    if axes is not None:
        axes = (axes,) if isinstance(axes, int) else tuple(axes)
        for ax in axes:
            if not -t.ndim <= ax < t.ndim:
                raise DimensionError(f"axis {ax} out of range for shape {t.shape}")
        if len({ax % t.ndim for ax in axes}) != len(axes):
            raise DimensionError(f"repeated axis in {axes}")
    return np.asarray(_REDUCERS[op](t, axis=axes), dtype=DTYPE)
