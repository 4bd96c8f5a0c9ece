"""Counter-based splitmix64 generator with Poisson(1) draws.

Every value is a pure function of its key, so results reproduce exactly on
any platform. Integer arithmetic runs on ``numpy.uint64`` arrays (which wrap
modulo 2**64); Poisson draws use only IEEE multiplication and comparison.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

# exp(-1) rounded to nearest double
EXP_MINUS_ONE = 0.36787944117144233
_TWO_M53 = 2.0 ** -53
# uniforms drawn per replicate before falling back to the scalar loop;
# P(Poisson(1) >= 10) ~ 1.1e-7
_POISSON_BLOCK = 10


def mix64(x: int) -> int:
    """splitmix64 output for state ``x`` (one GOLDEN step, then finalize)."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=np.uint64) + np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def derive_key(seed: int, item: int) -> int:
    """Combine a global seed with an item hash into a 64-bit stream key."""
    return mix64((seed & MASK64) ^ mix64(item & MASK64))


def uniforms(key: int, start: int, count: int) -> np.ndarray:
    """Uniforms in [0, 1) at positions ``start .. start+count-1`` of stream ``key``."""
    pos = np.arange(start, start + count, dtype=np.uint64)
    bits = mix64_array(np.uint64(key) + pos * np.uint64(GOLDEN))
    return (bits >> np.uint64(11)).astype(np.float64) * _TWO_M53


def uniforms_open(key: int, count: int) -> np.ndarray:
    """Uniforms in (0, 1], safe for ``log``."""
    pos = np.arange(count, dtype=np.uint64)
    bits = mix64_array(np.uint64(key) + pos * np.uint64(GOLDEN))
    return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_M53


def standard_normals(key: int, count: int) -> np.ndarray:
    """Box-Muller normals from stream ``key``."""
    half = (count + 1) // 2
    u = uniforms_open(key, 2 * half)
    r = np.sqrt(-2.0 * np.log(u[:half]))
    theta = 2.0 * np.pi * u[half:]
    return np.concatenate((r * np.cos(theta), r * np.sin(theta)))[:count]


def replicate_states(key: int, n_replicates: int) -> np.ndarray:
    b = np.arange(n_replicates, dtype=np.uint64)
    return mix64_array(np.uint64(key) ^ mix64_array(b))


def _poisson_scalar_tail(state: int, start: int, p: float, k: int) -> int:
    t = start
    while True:
        u = (mix64((state + t * GOLDEN) & MASK64) >> 11) * _TWO_M53
        p *= u
        if p <= EXP_MINUS_ONE:
            return k
        k += 1
        t += 1


def poisson1(key: int, n_replicates: int) -> np.ndarray:
    """``n_replicates`` Poisson(1) variates for stream ``key``.

    Replicate ``b`` runs Knuth's product-of-uniforms method over its own
    splitmix64 sequence; the count of running products above exp(-1) is the
    draw.
    """
    states = replicate_states(key, n_replicates)
    t = np.arange(_POISSON_BLOCK, dtype=np.uint64) * np.uint64(GOLDEN)
    bits = mix64_array(states[:, None] + t[None, :])
    u = (bits >> np.uint64(11)).astype(np.float64) * _TWO_M53
    prods = np.cumprod(u, axis=1)
    above = prods > EXP_MINUS_ONE
    draws = above.sum(axis=1).astype(np.int64)
    unfinished = np.flatnonzero(above[:, -1])
    for b in unfinished:
        draws[b] = _poisson_scalar_tail(
            int(states[b]), _POISSON_BLOCK, float(prods[b, -1]), _POISSON_BLOCK
        )
    return draws


def poisson1_reference(key: int, n_replicates: int) -> list[int]:
    """Pure-Python version of :func:`poisson1` for cross-checking."""
    out = []
    for b in range(n_replicates):
        state = mix64(key ^ mix64(b))
        out.append(_poisson_scalar_tail(state, 0, 1.0, 0))
    return out
