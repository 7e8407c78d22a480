"""Deterministic pseudo-random streams with a pinned algorithm.

Two generators, both fully specified here so that datasets and parameter
initialisation are reproducible byte for byte across platforms:

* Xoshiro256StarStar, seeded through splitmix64, for sequential structural
  draws (shape counts, sizes, positions, shuffles, parameter init).
* A counter-based splitmix64 stream feeding Box-Muller, for bulk per-pixel
  noise where a python-level loop would dominate generation time.

Substream seeds are derived with derive_seed(master, index) so that train
and validation splits, and every example within a split, get independent
streams from one master seed.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64_mix(z: int) -> int:
    """The splitmix64 output finaliser applied to a 64-bit value."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def splitmix64_next(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    return state, splitmix64_mix(state)


def derive_seed(master: int, index: int) -> int:
    """Independent substream seed for (master, index), itself a 64-bit int."""
    return splitmix64_mix((master & _MASK64) ^ splitmix64_mix(index & _MASK64))


class Xoshiro256StarStar:
    """xoshiro256** with splitmix64 state expansion from a single seed."""

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64_next(state)
            s.append(out)
        self._s = s

    @staticmethod
    def _rotl(x: int, k: int) -> int:
        return ((x << k) | (x >> (64 - k))) & _MASK64

    def next_u64(self) -> int:
        s = self._s
        result = (self._rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = self._rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def below(self, n: int) -> int:
        """Uniform integer in [0, n). Plain modulo; bias is irrelevant at
        the n used here (tens) and determinism is what matters."""
        if n <= 0:
            raise ValueError("below() needs a positive bound")
        return self.next_u64() % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError("randint with hi < lo")
        return lo + self.below(hi - lo + 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def normal(self) -> float:
        """One standard normal draw via Box-Muller (uses two uniforms)."""
        u1 = (self.next_u64() >> 11) + 1  # in [1, 2^53]: keeps log finite
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1 * 2.0**-53))
        return r * math.cos(2.0 * math.pi * u2)


def splitmix64_stream(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Vectorised counter-mode splitmix64: outputs for counters offset..offset+n-1.

    Matches splitmix64_next outputs for the same seed when offset counts from
    zero, i.e. element i equals the (offset + i + 1)-th sequential output.
    """
    if n < 0:
        raise ValueError("stream length must be non-negative")
    counters = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + counters * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def normal_field(seed: int, n: int) -> np.ndarray:
    """n standard normal draws as float64, from a counter-based stream.

    Box-Muller over pairs of splitmix64 outputs; deterministic in (seed, n)
    and independent of chunking because the stream is counter-indexed.
    """
    if n < 0:
        raise ValueError("field length must be non-negative")
    if n == 0:
        return np.zeros(0, dtype=np.float64)
    pairs = (n + 1) // 2
    bits = splitmix64_stream(seed, 2 * pairs)
    u1 = ((bits[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (bits[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]
