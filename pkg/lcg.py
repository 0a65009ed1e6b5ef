"""Portable seeded random streams.

Plans, datasets and steal-target picks must reproduce bit for bit across
implementations, so they are drawn from a documented 64-bit linear
congruential generator instead of numpy's bit generators:

    state' = state * 6364136223846793005 + 1442695040888963407  (mod 2**64)

Seeds are scrambled through splitmix64 first, and per-series streams
derive their seed as splitmix64(seed ^ splitmix64(i)).
"""
from __future__ import annotations

import numpy as np
import numpy.typing as npt

MULTIPLIER = 6364136223846793005
INCREMENT = 1442695040888963407
MASK = (1 << 64) - 1
TWO_PI = 2 * np.pi

U64Array = npt.NDArray[np.uint64]
FloatArray = npt.NDArray[np.float64]


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return x ^ (x >> 31)


def stream_seed(seed: int, i: int) -> int:
    return splitmix64((seed & MASK) ^ splitmix64(i))


class Lcg64:
    """Single scalar stream."""

    def __init__(self, seed: int):
        self.state = splitmix64(seed & MASK)

    def next_u64(self) -> int:
        self.state = (self.state * MULTIPLIER + INCREMENT) & MASK
        return self.state

    def below(self, n: int) -> int:
        """Uniform integer in [0, n), from the high 32 bits."""
        assert n > 0
        return ((self.next_u64() >> 32) * n) >> 32

    def uniform(self) -> float:
        """Uniform float in (0, 1], from the high 53 bits."""
        return ((self.next_u64() >> 11) + 1) * 2.0**-53

    def shuffle(self, items: list[int]) -> list[int]:
        """Fisher-Yates, last position first."""
        ret = list(items)
        for i in range(len(ret) - 1, 0, -1):
            j = self.below(i + 1)
            ret[i], ret[j] = ret[j], ret[i]
        return ret

    def choice(self, items: list[int]) -> int:
        return items[self.below(len(items))]


class LcgBank:
    """Many independent streams advanced in lock-step with numpy.

    uint64 array arithmetic wraps modulo 2**64, which is exactly the LCG.
    """

    def __init__(self, seed: int, count: int):
        self.state: U64Array = np.array(
            [splitmix64(stream_seed(seed, i)) for i in range(count)],
            dtype=np.uint64,
        )

    def next_u64(self) -> U64Array:
        with np.errstate(over="ignore"):
            self.state = self.state * np.uint64(MULTIPLIER) + np.uint64(
                INCREMENT
            )
        return self.state

    def uniform(self) -> FloatArray:
        hi = (self.next_u64() >> np.uint64(11)).astype(np.float64)
        return (hi + 1.0) * 2.0**-53

    def gaussian(self) -> FloatArray:
        """One N(0,1) draw per stream, Box-Muller cosine branch."""
        u1 = self.uniform()
        u2 = self.uniform()
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(TWO_PI * u2)


# Unit tests


def test_scalar_and_bank_streams_agree():
    seed = 42
    bank = LcgBank(seed, 3)
    drawn = bank.next_u64().copy()
    for i in range(3):
        rng = Lcg64(stream_seed(seed, i))
        assert rng.next_u64() == int(drawn[i])


def test_below_stays_in_range_and_is_reproducible():
    a, b = Lcg64(7), Lcg64(7)
    xs = [a.below(10) for _ in range(1000)]
    assert xs == [b.below(10) for _ in range(1000)]
    assert set(xs) == set(range(10))


def test_shuffle_is_a_permutation():
    items = list(range(50))
    shuffled = Lcg64(3).shuffle(items)
    assert sorted(shuffled) == items
    assert shuffled != items
    assert shuffled == Lcg64(3).shuffle(items)


def test_gaussian_moments():
    z = LcgBank(11, 10_000).gaussian()
    assert abs(z.mean()) < 0.05
    assert abs(z.var() - 1.0) < 0.1
