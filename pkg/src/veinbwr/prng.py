"""SplitMix64 streams: the bit-exact source of all keyed randomness."""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform real in [0, 1) with 53 random bits."""
        return (self.next64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Index in [0, n) as floor(u * n)."""
        return min(int(self.uniform() * n), n - 1)

    def shuffle(self, items: list) -> list:
        """In-place Fisher-Yates, swapping from the top index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def mix64(*words: int) -> int:
    """Fold integers into one 64-bit value (used to derive per-item seeds)."""
    state = 0
    for w in words:
        state = SplitMix64(state ^ (w & MASK64)).next64()
    return state
