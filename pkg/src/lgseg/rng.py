"""Seedable, splittable 64-bit random generator used everywhere determinism matters.

All randomness in this package (weight init, sampling, shuffling, scene
generation) flows through SplitMix64 so that a run is fully determined by its
seeds and reproduces bit-for-bit across platforms.  The generator has 64 bits
of state; the i-th output after state s0 is mix(s0 + i*GAMMA), which lets a
whole block of outputs be produced with vectorised uint64 arithmetic.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finaliser; operates on uint64 arrays with wrapping arithmetic.
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """SplitMix64 stream with block generation and per-consumer splitting."""

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix_int(self._state)

    def split(self) -> "SplitMix64":
        """Child generator whose stream is independent of later parent use."""
        return SplitMix64(self.next_u64())

    def u64_block(self, n: int) -> np.ndarray:
        """Next n raw outputs as a uint64 array (vectorised)."""
        if n < 0:
            raise ValueError("block size must be nonnegative")
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        out = _mix(np.uint64(self._state) + steps)
        self._state = (self._state + n * _GAMMA) & _MASK
        return out

    def floats(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1), from the top 53 bits of each output."""
        return (self.u64_block(n) >> np.uint64(11)) * (2.0 ** -53)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        size = int(np.prod(shape)) if np.ndim(shape) else int(shape)
        u = self.floats(size)
        return (low + (high - low) * u).reshape(shape)

    def below(self, bound: int) -> int:
        """Integer in [0, bound).  Modulo bias is < 2**-50 for desk-scale bounds."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound

    def int_range(self, low: int, high: int) -> int:
        """Integer in [low, high] inclusive."""
        if high < low:
            raise ValueError("empty range")
        return low + self.below(high - low + 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
