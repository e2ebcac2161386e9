"""Seed derivation and discrete sampling, stable across platforms and runs.

All randomness in the package is derived, never sequential: every consumer
computes its own seed from (base seed, structural indices) with a
splitmix64 fold, so skipping one consumer can never shift another's stream.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def derive_seed(*parts: int) -> int:
    """Fold integer parts into one 64-bit seed (order-sensitive)."""
    state = 0x8E51_2F58_36B2_61A4
    for part in parts:
        state = _mix((state + _GAMMA + (part & _MASK64)) & _MASK64)
    return state


class SplitMix:
    """Tiny splitmix64 generator for shuffles and small draws."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix(self._state)

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randrange needs a positive bound")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.randrange(len(items))]
