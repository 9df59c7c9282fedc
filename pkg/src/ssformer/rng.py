"""Deterministic counter-based random number generator.

The whole project draws randomness from a single primitive, the SplitMix64
output function applied to a running 64-bit counter:

    mix64(z):  z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
               z ^= z >> 27;  z *= 0x94D049BB133111EB
               z ^= z >> 31;  return z

    word(i) = mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)

All arithmetic is modulo 2^64. Uniform doubles take the top 53 bits
(`(word >> 11) * 2**-53`), normals come from Box-Muller pairs. Substreams
are derived as `mix64(seed ^ mix64(tag))`, so sample k of stream t never
collides with another (seed, tag) pair in practice. Everything is pure
integer math on the counter, which makes every draw reproducible across
platforms and numpy versions.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def mix64(z):
    """SplitMix64 finalizer over uint64 scalars or arrays."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):  # wraparound is the whole point
        z = z ^ (z >> _U64(30))
        z = z * _MIX1
        z = z ^ (z >> _U64(27))
        z = z * _MIX2
        z = z ^ (z >> _U64(31))
    return z


class Rng:
    """Counter-based generator; state is just (seed, counter)."""

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = np.uint64(0)

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64) + self.counter
        self.counter = self.counter + _U64(n)
        return mix64(self.seed + idx * _GOLDEN)

    def uniform(self, n: int | None = None) -> np.ndarray | float:
        """Doubles in [0, 1); scalar when n is None."""
        scalar = n is None
        u = (self._words(1 if scalar else n) >> _U64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if scalar else u

    def normal(self, n: int, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        """Standard Box-Muller; draws 2*ceil(n/2) uniforms."""
        half = (n + 1) // 2
        u1 = 1.0 - self.uniform(half)  # in (0, 1], keeps log finite
        u2 = self.uniform(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z * std + mean

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi); uses rejection-free modulo (bias < 2^-50 here)."""
        span = hi - lo
        if span <= 0:
            raise ValueError(f"empty range [{lo}, {hi})")
        return lo + int(self._words(1)[0] % np.uint64(span))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]

    def spawn(self, tag: int) -> "Rng":
        """Independent substream for e.g. per-sample augmentation."""
        return Rng(int(mix64(self.seed ^ mix64(np.uint64(tag & 0xFFFFFFFFFFFFFFFF)))))
