"""Counter-based random streams.

Every random number in the package comes from one generator: a SplitMix64
counter hash.  A *key* is derived from a seed and a tuple of integer
components (run seed, epoch, purpose tag, ...)::

    key = splitmix64(seed)
    for c in components:
        key = splitmix64(splitmix64(key) ^ splitmix64(c))

The ``j``-th 64-bit word for stream id ``i`` under ``key`` is::

    splitmix64(splitmix64(key ^ splitmix64(i)) ^ splitmix64(j))

Words become doubles in ``[0, 1)`` through their top 53 bits, and standard
normals come from Box-Muller pairs ``(u1, u2)``.  Nothing depends on call
order, so a per-sample draw depends only on ``(key, sample id, word index)``.
"""
from __future__ import annotations

import numpy as np

from . import _kernels
from ._kernels import MASK64, splitmix64_int

_INV_2_53 = 1.0 / 9007199254740992.0


def derive_key(seed: int, *components: int) -> int:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = splitmix64_int(int(seed) & MASK64)
    for c in components:
        key = splitmix64_int(splitmix64_int(key) ^ splitmix64_int(int(c) & MASK64))
    return key


def _to_unit(words: np.ndarray) -> np.ndarray:
    return (words >> np.uint64(11)).astype(np.float64) * _INV_2_53


def uniform(key: int, ids, width: int) -> np.ndarray:
    """Uniform ``[0, 1)`` draws of shape ``(len(ids), width)``."""
    ids = np.atleast_1d(np.asarray(ids)).astype(np.uint64)
    return _to_unit(_kernels.hash_block(np.uint64(key), ids, width))


def normal(key: int, ids, dim: int) -> np.ndarray:
    """Standard normal draws of shape ``(len(ids), dim)`` via Box-Muller."""
    pairs = (dim + 1) // 2
    u = uniform(key, ids, 2 * pairs)
    u1 = u[:, 0::2]
    u2 = u[:, 1::2]
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    z = np.empty((u.shape[0], 2 * pairs))
    z[:, 0::2] = r * np.cos(theta)
    z[:, 1::2] = r * np.sin(theta)
    return z[:, :dim]


class Stream:
    """Sequential view of a keyed generator: successive calls consume counters."""

    def __init__(self, seed: int, *components: int):
        self.key = derive_key(seed, *components)
        self.position = 0

    def _ids(self, n: int) -> np.ndarray:
        ids = np.arange(self.position, self.position + n, dtype=np.uint64)
        self.position += n
        return ids

    def uniform(self, n: int) -> np.ndarray:
        return uniform(self.key, self._ids(n), 1)[:, 0]

    def normal(self, n: int) -> np.ndarray:
        return normal(self.key, self._ids(n), 1)[:, 0]

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers uniform on ``[0, high)``."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
