"""Deterministic seed derivation via splitmix64 counter hashing.

Derived streams depend only on the base seed and the tag values, never
on call order, so per-scene / per-query substreams are stable under
reordering and parallel execution.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x) -> np.ndarray:
    """Vectorized splitmix64 finalizer over uint64 input."""
    z = (np.asarray(x, dtype=np.uint64) + _GAMMA)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(base: int, *tags: int) -> int:
    """Mix a base seed with integer tags into a new 64-bit seed."""
    h = np.uint64(base)
    for tag in tags:
        h = splitmix64(h ^ np.uint64(tag & 0xFFFFFFFFFFFFFFFF))
    return int(h)


def choice_uniform(keys: np.ndarray, n_options: np.ndarray) -> np.ndarray:
    """Counter-based uniform pick in [0, n_options) per key (vectorized)."""
    h = splitmix64(keys)
    return (h % np.maximum(n_options.astype(np.uint64), 1)).astype(np.intp)
