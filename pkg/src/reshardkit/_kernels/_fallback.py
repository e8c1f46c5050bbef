"""Numpy implementation of the element-hash kernels.

Synthetic tensor content is a splitmix64 stream: the value of element i of a
tensor is ``finalize(base + i * GAMMA)`` where ``base`` encodes (seed, fqn).
Everything here operates on uint64 with wraparound semantics.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15

_GAMMA_U64 = np.uint64(GAMMA)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def hash_flat_range(base: int, start: int, count: int) -> np.ndarray:
    """Hashes for flat element indices [start, start + count)."""
    idx = np.arange(start, start + count, dtype=np.uint64)
    return _finalize(np.uint64(base & MASK64) + idx * _GAMMA_U64)


def hash_region(base: int, strides, offsets, lengths) -> np.ndarray:
    """Hashes for a rectangular region, in row-major order of the region.

    ``strides`` are element strides of the housing global tensor; the flat
    index of region coordinate c is sum((offsets[i] + c[i]) * strides[i]).
    """
    acc = None
    for off, length, stride in zip(offsets, lengths, strides):
        axis = (np.uint64(off) + np.arange(length, dtype=np.uint64)) * np.uint64(stride)
        acc = axis if acc is None else np.add.outer(acc, axis)
    if acc is None:
        return np.empty(0, dtype=np.uint64)
    flat = acc.reshape(-1)
    return _finalize(np.uint64(base & MASK64) + flat * _GAMMA_U64)
