"""Deterministic, platform-independent random streams.

All randomness in the package flows from a single master seed through two
small, fully specified generators so that runs reproduce bit-for-bit across
platforms (and are easy to re-implement elsewhere):

* sub-seed derivation: SplitMix64.  ``derive(master, *path)`` advances a
  SplitMix64 state by the golden-ratio increment ``0x9E3779B97F4A7C15`` once
  per path element (xor-ing the element in) and applies the standard
  finalizer (``0xBF58476D1CE4E5B9`` / ``0x94D049BB133111EB`` multiply-xor
  rounds).
* value streams: xorshift64* with shift triple (12, 25, 27) and output
  multiplier ``0x2545F4914F6CDD1D``, seeded through the SplitMix64 finalizer
  so a zero seed is safe.  Doubles take the top 53 bits; normals use
  Box-Muller.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_STAR = 0x2545F4914F6CDD1D


def mix64(z: int) -> int:
    """SplitMix64 finalizer: bijective 64-bit scrambling."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def derive(master: int, *path: int) -> int:
    """Derive a sub-seed from ``master`` and an integer path.

    Distinct paths give statistically independent streams; the empty path
    returns a scrambling of the master seed itself.
    """
    s = master & _MASK
    s = mix64(s + _GOLDEN)
    for p in path:
        s = mix64((s ^ (p & _MASK)) + _GOLDEN)
    return s


class Stream:
    """Sequential xorshift64* stream with convenience samplers."""

    __slots__ = ("state", "_spare_normal")

    def __init__(self, seed: int):
        s = mix64(seed)
        self.state = s if s != 0 else _GOLDEN
        self._spare_normal = None

    def u64(self) -> int:
        s = self.state
        s ^= s >> 12
        s = (s ^ (s << 25)) & _MASK
        s ^= s >> 27
        self.state = s
        return (s * _STAR) & _MASK

    def f64(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.f64()

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + int(self.f64() * (hi - lo + 1))

    def normal(self) -> float:
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        u1 = 1.0 - self.f64()  # (0, 1]: keeps log() finite
        u2 = self.f64()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    # -- array fills ---------------------------------------------------

    def f64_array(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.f64()
        return out

    def normal_array(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.normal()
        return out

    def uniform_array(self, n: int, lo: float, hi: float) -> np.ndarray:
        return lo + (hi - lo) * self.f64_array(n)
