"""Deterministic, portable random numbers.

All stochastic choices in the toolkit (template draws, split shuffles,
parameter init) flow from one 64-bit seed through the splitmix64 generator,
so outputs are reproducible across platforms and worker counts.
"""

from __future__ import annotations

MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(state: int) -> tuple[int, int]:
    """Advance splitmix64 once; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def hash_string(s: str) -> int:
    """FNV-1a 64-bit, for deriving per-item seeds from string keys."""
    h = 0xCBF29CE484222325
    for b in s.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return h


class SplitMix64:
    """Small deterministic PRNG; not cryptographic."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state, out = splitmix64(self.state)
        return out

    def randrange(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        limit = (MASK64 + 1) - ((MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def uniform(self, lo: float, hi: float) -> float:
        # 53-bit mantissa draw in [0, 1)
        u = self.next_u64() >> 11
        return lo + (hi - lo) * (u / float(1 << 53))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]


def derive_seed(seed: int, *keys: str | int) -> int:
    """Mix a base seed with string/int keys into an independent stream seed."""
    s = seed & MASK64
    for key in keys:
        k = hash_string(key) if isinstance(key, str) else (key & MASK64)
        s, out = splitmix64((s ^ k) & MASK64)
        s = out
    return s
