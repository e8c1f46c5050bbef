# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled element-hash kernels (splitmix64 stream over flat indices).

Must stay bit-identical to ``_fallback``; tests compare both backends.
"""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15
cdef uint64_t M1 = 0xBF58476D1CE4E5B9
cdef uint64_t M2 = 0x94D049BB133111EB

DEF MAX_RANK = 16


cdef inline uint64_t _finalize(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * M1
    z = (z ^ (z >> 27)) * M2
    return z ^ (z >> 31)


def hash_flat_range(uint64_t base, uint64_t start, Py_ssize_t count):
    """Hashes for flat element indices [start, start + count)."""
    out = np.empty(count, dtype=np.uint64)
    cdef uint64_t[::1] view = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(count):
            view[i] = _finalize(base + (start + <uint64_t> i) * GAMMA)
    return out


def hash_region(uint64_t base, strides, offsets, lengths):
    """Hashes for a rectangular region, in row-major order of the region."""
    cdef Py_ssize_t rank = len(lengths)
    if rank == 0:
        return np.empty(0, dtype=np.uint64)
    if rank > MAX_RANK:
        raise ValueError(f"region rank {rank} exceeds kernel limit {MAX_RANK}")

    cdef uint64_t st[MAX_RANK]
    cdef int64_t ln[MAX_RANK]
    cdef int64_t pos[MAX_RANK]
    cdef Py_ssize_t i
    cdef uint64_t flat = 0
    cdef int64_t total = 1
    for i in range(rank):
        st[i] = <uint64_t> strides[i]
        ln[i] = <int64_t> lengths[i]
        pos[i] = 0
        flat += (<uint64_t> offsets[i]) * st[i]
        total *= ln[i]

    out = np.empty(total, dtype=np.uint64)
    cdef uint64_t[::1] view = out
    cdef Py_ssize_t n, axis
    with nogil:
        for n in range(total):
            view[n] = _finalize(base + flat * GAMMA)
            # odometer increment, innermost axis fastest
            axis = rank - 1
            while axis >= 0:
                pos[axis] += 1
                flat += st[axis]
                if pos[axis] < ln[axis]:
                    break
                flat -= (<uint64_t> ln[axis]) * st[axis]
                pos[axis] = 0
                axis -= 1
    return out
