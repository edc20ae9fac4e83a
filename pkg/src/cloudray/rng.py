"""Counter-based deterministic random streams.

Every draw is a pure function of (seed, key0, key1, ...), so samples for any
subset of pixels / samples-per-pixel / bounces can be generated independently,
in any order, by any number of workers, and still match a single-threaded run
bit for bit.  The mixer is the splitmix64 finalizer applied once per key.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1
_INV_2_53 = float(2.0 ** -53)


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def hash_keys(seed: int, *keys) -> np.ndarray:
    """Mix an integer seed with broadcastable integer key arrays into uint64."""
    # 0-d arrays throughout: numpy arrays wrap on unsigned overflow silently.
    h = np.asarray((int(seed) * 0x9E3779B97F4A7C15 + 1) & _MASK, dtype=np.uint64)
    for k in keys:
        k = np.asarray(k, dtype=np.uint64)
        h = _finalize((h ^ (k * _GOLDEN + _GOLDEN)) + _GOLDEN)
    if h.ndim == 0 and not keys:
        h = _finalize(h)
    return h


def uniform(seed: int, *keys) -> np.ndarray:
    """Uniform float64 in [0, 1), one draw per broadcast element of ``keys``."""
    bits = hash_keys(seed, *keys)
    return (bits >> np.uint64(11)).astype(np.float64) * _INV_2_53
