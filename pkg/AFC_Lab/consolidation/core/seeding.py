"""Deterministic seed derivation (splitmix64) from one master seed."""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> int:
    z = (state + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *keys: int) -> int:
    """Fold integer keys into the master seed; same keys, same seed."""
    state = splitmix64(int(master) & _MASK)
    for key in keys:
        state = splitmix64(state ^ (int(key) & _MASK))
    return state


def derive_rng(master: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))


# Stream tags so that different consumers never share a sequence.
STREAM_INIT = 1
STREAM_HEAD = 2
STREAM_LOADER = 3
STREAM_IMPORTANCE = 4
STREAM_MEMORY = 5
