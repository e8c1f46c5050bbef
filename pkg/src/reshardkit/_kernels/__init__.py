"""Hash kernels with a compiled core and a numpy fallback.

The backend is picked once at import: the Cython extension when it built,
otherwise numpy. Set ``RESHARDKIT_KERNELS=numpy`` (or ``compiled``) to force
one, e.g. for the benchmark in ``benchmarks/bench_kernels.py``.
"""

from __future__ import annotations

import os

from ._fallback import GAMMA, MASK64

_choice = os.environ.get("RESHARDKIT_KERNELS", "auto").lower()

if _choice == "numpy":
    from . import _fallback as _impl

    BACKEND = "numpy"
elif _choice == "compiled":
    from . import _core as _impl  # raises if the extension did not build

    BACKEND = "compiled"
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        from . import _fallback as _impl

        BACKEND = "numpy"

hash_flat_range = _impl.hash_flat_range
hash_region = _impl.hash_region


def scalar_mix(value: int) -> int:
    """splitmix64 finalizer for a single value (used to derive stream bases)."""
    z = value & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_base(seed: int, name: str) -> int:
    """Base of the hash stream for one named tensor under one seed.

    FNV-1a over the UTF-8 name, mixed with the seed; a pure function so any
    two callers derive bit-identical streams.
    """
    h = 0xCBF29CE484222325
    for b in name.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return scalar_mix(scalar_mix(seed & MASK64) ^ h)


__all__ = [
    "BACKEND",
    "GAMMA",
    "MASK64",
    "hash_flat_range",
    "hash_region",
    "scalar_mix",
    "stream_base",
]
