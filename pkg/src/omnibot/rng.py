"""Deterministic seed derivation.

Every random draw in the package flows through a numpy Generator whose
seed is derived from a master seed plus a tuple of context keys (strings
and integers) via splitmix64. Derivation is order-sensitive and
collision-resistant enough for our purposes, and crucially independent
of worker scheduling: seed(batch 17) is the same no matter which worker
builds batch 17.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(state: int) -> int:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *keys: int | str) -> int:
    """Mix a master seed with context keys into a 64-bit stream seed."""
    state = _splitmix64(master & _MASK)
    for key in keys:
        if isinstance(key, str):
            for byte in key.encode("utf-8"):
                state = _splitmix64(state ^ byte)
        else:
            state = _splitmix64(state ^ (int(key) & _MASK))
    return state


def generator(master: int, *keys: int | str) -> np.random.Generator:
    """A fresh PCG64 generator for the (master, *keys) stream."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *keys)))
