"""Hot elementwise kernels with a numba path and a pure-numpy fallback.

The numba versions are used when numba imports cleanly and the environment
variable ``SPFM_DISABLE_JIT`` is unset (or ``0``).  Both implementations are
always importable as ``<name>_numpy`` / ``<name>_numba`` so they can be
compared directly.

The integer hash kernels are bit-identical across the two paths.  The SiLU
kernels agree to within a few ulps (libm ``exp`` vs numpy's vectorised one);
only the hash is dispatched to numba by default.
"""
from __future__ import annotations

import os

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1


def _env_disabled() -> bool:
    return os.environ.get("SPFM_DISABLE_JIT", "0").strip().lower() not in ("", "0", "false", "no")


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _env_disabled()


# ---------------------------------------------------------------------------
# SplitMix64 counter hash
# ---------------------------------------------------------------------------

def splitmix64_int(x: int) -> int:
    """Scalar SplitMix64 finaliser on Python ints (used for key derivation)."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def _splitmix64_arr(x: np.ndarray) -> np.ndarray:
    z = x + np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def hash_block_numpy(key: np.uint64, ids: np.ndarray, width: int) -> np.ndarray:
    """``out[i, j] = mix(mix(key ^ mix(ids[i])) ^ mix(j))`` as uint64."""
    ids = np.asarray(ids, dtype=np.uint64)
    row = _splitmix64_arr(np.uint64(key) ^ _splitmix64_arr(ids))
    col = _splitmix64_arr(np.arange(width, dtype=np.uint64))
    return _splitmix64_arr(row[:, None] ^ col[None, :])


def silu_numpy(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(z * sigmoid(z), sigmoid(z))``."""
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def silu_grad_numpy(upstream: np.ndarray, z: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Backprop through SiLU: ``upstream * (s + z s (1 - s))``."""
    return upstream * (s * (1.0 + z * (1.0 - s)))


if HAVE_NUMBA:
    _G = np.uint64(GOLDEN)
    _M1 = np.uint64(MIX1)
    _M2 = np.uint64(MIX2)
    _S30 = np.uint64(30)
    _S27 = np.uint64(27)
    _S31 = np.uint64(31)

    @numba.njit(cache=True, inline="always")
    def _mix_nb(x):
        z = x + _G
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        return z ^ (z >> _S31)

    @numba.njit(cache=True)
    def _hash_block_nb(key, ids, width):
        n = ids.shape[0]
        out = np.empty((n, width), dtype=np.uint64)
        cols = np.empty(width, dtype=np.uint64)
        for j in range(width):
            cols[j] = _mix_nb(np.uint64(j))
        for i in range(n):
            r = _mix_nb(key ^ _mix_nb(ids[i]))
            for j in range(width):
                out[i, j] = _mix_nb(r ^ cols[j])
        return out

    @numba.njit(cache=True)
    def _silu_nb(z):
        flat = z.ravel()
        a = np.empty_like(flat)
        s = np.empty_like(flat)
        for i in range(flat.shape[0]):
            si = 1.0 / (1.0 + np.exp(-flat[i]))
            s[i] = si
            a[i] = flat[i] * si
        return a.reshape(z.shape), s.reshape(z.shape)

    @numba.njit(cache=True)
    def _silu_grad_nb(upstream, z, s):
        u = upstream.ravel()
        zf = z.ravel()
        sf = s.ravel()
        out = np.empty_like(u)
        for i in range(u.shape[0]):
            out[i] = u[i] * (sf[i] * (1.0 + zf[i] * (1.0 - sf[i])))
        return out.reshape(upstream.shape)

    def hash_block_numba(key, ids, width: int) -> np.ndarray:
        ids = np.ascontiguousarray(ids, dtype=np.uint64)
        return _hash_block_nb(np.uint64(key), ids, int(width))

    def silu_numba(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _silu_nb(np.ascontiguousarray(z, dtype=np.float64))

    def silu_grad_numba(upstream, z, s) -> np.ndarray:
        return _silu_grad_nb(
            np.ascontiguousarray(upstream, dtype=np.float64),
            np.ascontiguousarray(z, dtype=np.float64),
            np.ascontiguousarray(s, dtype=np.float64),
        )
else:  # pragma: no cover
    hash_block_numba = hash_block_numpy
    silu_numba = silu_numpy
    silu_grad_numba = silu_grad_numpy


hash_block = hash_block_numba if USE_NUMBA else hash_block_numpy
# numpy's SIMD exp beats the scalar numba loop (benchmarks/bench_kernels.py),
# so SiLU dispatches to numpy on both paths.
silu = silu_numpy
silu_grad = silu_grad_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
