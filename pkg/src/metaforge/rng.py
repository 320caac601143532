"""Seed derivation and counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from a root seed and a tuple of integer/string tags via splitmix64.
Streams for different tags are independent, so a worker that knows
(seed, tags) reproduces exactly what a serial run would draw.
"""
import zlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state):
    """One splitmix64 step; returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _tag_value(tag):
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    return int(tag) & _MASK


def derive_key(seed, *tags):
    state = int(seed) & _MASK
    state, out = splitmix64(state)
    for tag in tags:
        state, out = splitmix64(state ^ _tag_value(tag))
    return out


def stream(seed, *tags):
    """Return a numpy Generator keyed by (seed, *tags)."""
    key = derive_key(seed, *tags)
    _, hi = splitmix64(key)
    return np.random.Generator(np.random.Philox(key=[key, hi]))
