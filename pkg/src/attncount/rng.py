"""SplitMix64 pseudo-random streams.

Every random decision in the package (scene synthesis, crop offsets, weight
init, epoch shuffles) draws from this generator so that a run is a pure
function of its integer seed.  The sequence is the standard SplitMix64:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Draws are vectorized with numpy uint64 arithmetic, which wraps modulo 2**64.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Finalizer applied to a single 64-bit integer."""
    return int(_mix(np.array([value & MASK64], dtype=np.uint64))[0])


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically combine a base seed with integer keys into a new seed."""
    s = seed & MASK64
    for k in keys:
        s = mix64((s + GAMMA * ((k & MASK64) + 1)) & MASK64)
    return s


class SplitMix64:
    """A SplitMix64 stream with numpy-vectorized draws."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self, n: int | None = None):
        count = 1 if n is None else int(n)
        steps = np.arange(1, count + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(GAMMA)
        self.state = (self.state + GAMMA * count) & MASK64
        out = _mix(z)
        return int(out[0]) if n is None else out

    def uniform(self, n: int | None = None, low: float = 0.0, high: float = 1.0):
        """Floats in [low, high) built from the top 53 bits."""
        raw = self.next_u64(1 if n is None else n)
        u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = low + (high - low) * u
        return float(u[0]) if n is None else u

    def normal(self, n: int | None = None, mean: float = 0.0, std: float = 1.0):
        """Gaussian draws via Box-Muller (one pair per two uniforms)."""
        count = 1 if n is None else int(n)
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[:pairs]  # (0, 1], keeps log finite
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:count]
        z = mean + std * z
        return float(z[0]) if n is None else z

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in [low, high) by multiply-shift on a 53-bit uniform."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(1 if n is None else n)
        vals = low + np.floor(u * (high - low)).astype(np.int64)
        vals = np.minimum(vals, high - 1)
        return int(vals[0]) if n is None else vals

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
