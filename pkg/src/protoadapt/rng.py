"""Deterministic random number generation.

The generator is xoshiro256** with its four state words seeded through
splitmix64, so a single 64-bit seed always reproduces the same stream on
every platform. Uniforms take the top 53 bits of each output word;
gaussians apply the Box-Muller transform to two consecutive uniforms.
Nothing here depends on the host RNG or on numpy's bit generators.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_INV53 = 2.0 ** -53
_TWO_PI = 2.0 * math.pi


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Rng:
    """Seeded xoshiro256** stream with uniform and gaussian draws."""

    __slots__ = ("_s0", "_s1", "_s2", "_s3")

    def __init__(self, seed: int):
        sm = seed & _MASK64
        sm, self._s0 = _splitmix64(sm)
        sm, self._s1 = _splitmix64(sm)
        sm, self._s2 = _splitmix64(sm)
        sm, self._s3 = _splitmix64(sm)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        x = (s1 * 5) & _MASK64
        result = ((x << 7 | x >> 57) & _MASK64) * 9 & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << 45 | s3 >> 19) & _MASK64
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def uniform(self) -> float:
        """One draw from [0, 1); 1.0 is never returned."""
        return (self.next_u64() >> 11) * _INV53

    def gauss(self) -> float:
        """Standard normal via Box-Muller on two consecutive uniforms."""
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log1p(-u1)) * math.cos(_TWO_PI * u2)

    def index(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("index() needs n >= 1")
        return int(self.uniform() * n)

    def uniform_n(self, n: int) -> np.ndarray:
        # Inlined hot loop: the state update is cheap, attribute access is not.
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            x = (s1 * 5) & _MASK64
            r = ((x << 7 | x >> 57) & _MASK64) * 9 & _MASK64
            t = (s1 << 17) & _MASK64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = (s3 << 45 | s3 >> 19) & _MASK64
            out[i] = (r >> 11) * _INV53
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return out

    def gauss_n(self, n: int) -> np.ndarray:
        # scalar libm on purpose: numpy's vectorized transcendentals can
        # differ from math.* by an ulp, which would break the contract
        # that bulk draws equal repeated scalar draws
        u = self.uniform_n(2 * n)
        out = np.empty(n, dtype=np.float64)
        sqrt, log1p, cos = math.sqrt, math.log1p, math.cos
        for i in range(n):
            out[i] = sqrt(-2.0 * log1p(-u[2 * i])) * cos(_TWO_PI * u[2 * i + 1])
        return out

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.index(i + 1)
            items[i], items[j] = items[j], items[i]
