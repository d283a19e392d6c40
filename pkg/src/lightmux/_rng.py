"""Seed derivation and counter-based normal draws.

Every random stream in the package is keyed by a tuple of integers, never by
call order, so work can be split across processes without changing results.
"""
import hashlib

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def derive_seed(*parts):
    """Hash a tuple of ints/strings into a 63-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") >> 1


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed, index):
    """Uniform draws in (0, 1) at the given counter positions of stream `seed`.

    `seed` and `index` broadcast, so many streams can be drawn at once.
    """
    index = np.asarray(index, dtype=np.uint64)
    seed = np.asarray(seed, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _mix(seed + _GOLDEN)
        z = _mix(key + (index + np.uint64(1)) * _GOLDEN)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def counter_normal(seed, index):
    """Standard normal draws, one per counter position."""
    return ndtri(counter_uniform(seed, index))
