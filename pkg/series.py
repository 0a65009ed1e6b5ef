"""Data-series summaries and distance kernels.

A series is a 1-D float64 numpy array; a collection is a 2-D array with
one series per row. PAA and iSAX summaries come in two flavours: single
series (PaaSummary / ISaxWord, used at query time) and whole collections
(paa_all / isax_all, used when building indexes).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cache
import math

import numpy as np
import numpy.typing as npt
from dtaidistance import dtw
from scipy.ndimage import maximum_filter1d, minimum_filter1d
from scipy.stats import norm

MAX_CARD_BITS = 8
DEFAULT_SEGMENTS = 16
ZERO_STD = 1e-12

Series = npt.NDArray[np.float64]
Collection = npt.NDArray[np.float64]
SymbolMatrix = npt.NDArray[np.uint8]
Bounds = npt.NDArray[np.float64]


class InvalidInput(ValueError):
    pass


@cache
def breakpoints(bits: int) -> Bounds:
    """Standard-normal breakpoints splitting the line into 2**bits regions.

    Every table is a sub-sample of the MAX_CARD_BITS table, so regions nest
    exactly and truncating a symbol's low bits gives its coarser region.
    """
    if not 1 <= bits <= MAX_CARD_BITS:
        raise InvalidInput(f"cardinality bits {bits} not in 1..{MAX_CARD_BITS}")
    full = 1 << MAX_CARD_BITS
    finest = norm.ppf(np.arange(1, full) / full)
    step = 1 << (MAX_CARD_BITS - bits)
    return np.asarray(finest[step - 1 :: step], dtype=np.float64)


def region(symbol: int, bits: int) -> tuple[float, float]:
    bp = breakpoints(bits)
    lo = -math.inf if symbol == 0 else float(bp[symbol - 1])
    hi = math.inf if symbol == len(bp) else float(bp[symbol])
    return lo, hi


@dataclass(frozen=True)
class PaaSummary:
    means: Series
    length: int  # n, length of the summarised series

    @property
    def w(self) -> int:
        return len(self.means)

    @property
    def segment_width(self) -> int:
        return self.length // self.w


@dataclass(frozen=True)
class ISaxWord:
    symbols: tuple[int, ...]
    card_bits: tuple[int, ...]

    def __post_init__(self):
        if len(self.symbols) != len(self.card_bits):
            raise InvalidInput(f"{self} mixes segment counts")
        for sym, bits in zip(self.symbols, self.card_bits):
            if not 1 <= bits <= MAX_CARD_BITS or not 0 <= sym < (1 << bits):
                raise InvalidInput(f"symbol {sym} invalid at {bits} bits")

    def __str__(self) -> str:
        return " ".join(
            f"{sym:0{bits}b}" for sym, bits in zip(self.symbols, self.card_bits)
        )

    @property
    def w(self) -> int:
        return len(self.symbols)

    @classmethod
    def from_row(cls, row: npt.NDArray[np.uint8], bits: int) -> ISaxWord:
        """Word for a row of max-cardinality symbols, truncated to bits."""
        shift = MAX_CARD_BITS - bits
        return cls(
            tuple(int(s) >> shift for s in row), (bits,) * len(row)
        )

    def promote(self, segment: int, bit: int) -> ISaxWord:
        """Child word: one more bit of cardinality on one segment."""
        symbols, card_bits = list(self.symbols), list(self.card_bits)
        symbols[segment] = (symbols[segment] << 1) | bit
        card_bits[segment] += 1
        return ISaxWord(tuple(symbols), tuple(card_bits))

    def contains(self, row: npt.NDArray[np.uint8]) -> bool:
        """Does a max-cardinality symbol row fall inside this word?"""
        return all(
            int(s) >> (MAX_CARD_BITS - bits) == sym
            for s, sym, bits in zip(row, self.symbols, self.card_bits)
        )

    def bounds(self) -> tuple[Bounds, Bounds]:
        lo, hi = zip(
            *(region(s, b) for s, b in zip(self.symbols, self.card_bits))
        )
        return np.array(lo), np.array(hi)


def z_normalize(s: Series) -> Series:
    if len(s) < 2:
        raise InvalidInput(f"cannot z-normalize a series of length {len(s)}")
    std = s.std()
    if std < ZERO_STD:
        return np.zeros_like(s, dtype=np.float64)
    return (s - s.mean()) / std


def z_normalize_all(data: Collection) -> Collection:
    if data.shape[1] < 2:
        raise InvalidInput(f"cannot z-normalize length {data.shape[1]}")
    mean = data.mean(axis=1, keepdims=True)
    std = data.std(axis=1, keepdims=True)
    flat = std < ZERO_STD
    ret = (data - mean) / np.where(flat, 1.0, std)
    ret[flat[:, 0]] = 0.0
    return ret


def _check_segments(length: int, w: int) -> None:
    if w < 1 or length % w != 0:
        raise InvalidInput(f"{w} segments do not divide length {length}")


def paa(s: Series, w: int) -> PaaSummary:
    _check_segments(len(s), w)
    return PaaSummary(s.reshape(w, -1).mean(axis=1), len(s))


def paa_all(data: Collection, w: int) -> Collection:
    _check_segments(data.shape[1], w)
    return data.reshape(len(data), w, -1).mean(axis=2)


def isax_from_paa(p: PaaSummary, card_bits: int) -> ISaxWord:
    # side="right": a mean sitting on a breakpoint goes to the upper region
    symbols = np.searchsorted(breakpoints(card_bits), p.means, side="right")
    return ISaxWord(tuple(int(s) for s in symbols), (card_bits,) * p.w)


def isax_all(
    means: Collection, card_bits: int = MAX_CARD_BITS
) -> SymbolMatrix:
    symbols = np.searchsorted(breakpoints(card_bits), means, side="right")
    return symbols.astype(np.uint8)


def euclidean_distance(a: Series, b: Series) -> float:
    if len(a) != len(b):
        raise InvalidInput(f"length mismatch: {len(a)} vs {len(b)}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def euclidean_distances(data: Collection, q: Series) -> Series:
    """Distances from every row of a collection to one series."""
    return np.sqrt(np.sum((data - q) ** 2, axis=1))


def region_lower_bounds(
    upper: Bounds, lower: Bounds, lo: Bounds, hi: Bounds, segment_width: int
) -> Series:
    """Lower bounds between query segment bounds and iSAX regions.

    For Euclidean search upper == lower == the query PAA (classic MINDIST);
    for DTW they are the per-segment max/min of the query's envelope. lo and
    hi may hold one region per row to bound many words at once.
    """
    above = np.maximum(lo - upper, 0.0)
    below = np.maximum(lower - hi, 0.0)
    gaps = above**2 + below**2
    return np.sqrt(segment_width * np.sum(np.atleast_2d(gaps), axis=1))


def lower_bound_distance(query_paa: PaaSummary, word: ISaxWord) -> float:
    if query_paa.w != word.w:
        raise InvalidInput(f"segments differ: {query_paa.w} vs {word.w}")
    lo, hi = word.bounds()
    means = query_paa.means
    return float(
        region_lower_bounds(means, means, lo, hi, query_paa.segment_width)[0]
    )


def dtw_distance(
    a: Series, b: Series, r: int, bound: float = math.inf
) -> float:
    """Sakoe-Chiba constrained DTW of radius r over squared point costs.

    Returns inf once the warping path cost is certain to exceed bound.
    """
    n = len(a)
    if n != len(b):
        raise InvalidInput(f"length mismatch: {n} vs {len(b)}")
    if not 0 <= r < n:
        raise InvalidInput(f"window {r} outside [0, {n})")
    if r == 0:  # band collapses to the diagonal
        return euclidean_distance(a, b)
    # dtaidistance bands are |i - j| < window
    return float(
        dtw.distance(
            np.ascontiguousarray(a, dtype=np.double),
            np.ascontiguousarray(b, dtype=np.double),
            window=r + 1,
            max_dist=None if math.isinf(bound) else bound,
            use_c=True,
        )
    )


@dataclass(frozen=True)
class Envelope:
    upper: Series
    lower: Series
    window: int

    def segment_bounds(self, w: int) -> tuple[Bounds, Bounds]:
        """Per-segment max of upper / min of lower, for region bounds."""
        _check_segments(len(self.upper), w)
        return (
            self.upper.reshape(w, -1).max(axis=1),
            self.lower.reshape(w, -1).min(axis=1),
        )


def keogh_envelope(q: Series, r: int) -> Envelope:
    if not 0 <= r < len(q):
        raise InvalidInput(f"window {r} outside [0, {len(q)})")
    size = 2 * r + 1
    return Envelope(
        maximum_filter1d(q, size, mode="nearest"),
        minimum_filter1d(q, size, mode="nearest"),
        r,
    )


def lb_keogh(env: Envelope, c: Series) -> float:
    if len(c) != len(env.upper):
        raise InvalidInput(f"length mismatch: {len(c)} vs {len(env.upper)}")
    return float(lb_keogh_all(env, c[np.newaxis, :])[0])


def lb_keogh_all(env: Envelope, data: Collection) -> Series:
    above = np.maximum(data - env.upper, 0.0)
    below = np.maximum(env.lower - data, 0.0)
    return np.sqrt(np.sum(above**2 + below**2, axis=1))


# Unit tests


def _dtw_oracle(a: Series, b: Series, r: int) -> float:
    n = len(a)
    dp = np.full((n + 1, n + 1), np.inf)
    dp[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            if abs(i - j) <= r:
                cost = (a[i - 1] - b[j - 1]) ** 2
                best = min(dp[i - 1, j], dp[i, j - 1], dp[i - 1, j - 1])
                dp[i, j] = cost + best
    return float(np.sqrt(dp[n, n]))


def test_z_normalize():
    assert list(z_normalize(np.array([5.0, 5, 5, 5]))) == [0, 0, 0, 0]
    assert list(z_normalize(np.array([0.0, 2.0]))) == [-1, 1]
    s = z_normalize(np.random.default_rng(0).normal(3, 7, 100))
    assert abs(s.mean()) < 1e-9 and abs(s.std() - 1) < 1e-9
    for bad in [np.array([]), np.array([1.0])]:
        try:
            z_normalize(bad)
        except InvalidInput:
            pass
        else:
            assert False, bad


def test_z_normalize_all_matches_single():
    data = np.random.default_rng(1).normal(size=(5, 32))
    data[2] = 4.0
    for row, expect in zip(z_normalize_all(data), data):
        assert np.allclose(row, z_normalize(expect))


def test_paa():
    assert list(paa(np.array([1.0, 1, 3, 3]), 2).means) == [1, 3]
    assert list(paa(np.array([4.0, 4, 4, 4]), 1).means) == [4]
    s = np.random.default_rng(2).normal(size=256)
    expect = [s[i * 16 : (i + 1) * 16].mean() for i in range(16)]
    assert np.allclose(paa(s, 16).means, expect)
    try:
        paa(np.zeros(10), 3)
    except InvalidInput:
        pass
    else:
        assert False


def test_isax_from_paa():
    assert isax_from_paa(PaaSummary(np.array([0.0]), 1), 1).symbols == (1,)
    assert isax_from_paa(PaaSummary(np.array([-10.0]), 1), 2).symbols == (0,)
    means = np.random.default_rng(3).normal(size=10_000)
    bp = breakpoints(8)
    symbols = isax_all(means[:, np.newaxis], 8)[:, 0]
    for m, s in zip(means[:500], symbols[:500]):
        assert s == sum(1 for b in bp if b <= m)  # linear scan oracle


def test_breakpoints_nest():
    fine = isax_all(np.random.default_rng(4).normal(size=(1000, 1)), 8)
    for bits in range(1, 8):
        coarse = isax_all(
            np.random.default_rng(4).normal(size=(1000, 1)), bits
        )
        assert (fine >> (8 - bits) == coarse).all()


def test_euclidean_distance():
    a = np.random.default_rng(5).normal(size=64)
    b = np.random.default_rng(6).normal(size=64)
    assert euclidean_distance(a, a) == 0
    assert euclidean_distance(np.array([0.0, 0]), np.array([3.0, 4])) == 5
    naive = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    assert math.isclose(euclidean_distance(a, b), naive, rel_tol=1e-9)
    assert euclidean_distance(a, b) == euclidean_distance(b, a)


def test_triangle_inequality():
    rng = np.random.default_rng(7)
    for _ in range(100):
        a, b, c = rng.normal(size=(3, 16))
        ab, bc = euclidean_distance(a, b), euclidean_distance(b, c)
        assert euclidean_distance(a, c) <= ab + bc + 1e-12


def test_lower_bound_containment():
    s = np.random.default_rng(8).normal(size=64)
    p = paa(s, 8)
    for bits in range(1, 9):
        assert lower_bound_distance(p, isax_from_paa(p, bits)) == 0


def test_lower_bound_soundness_sweep():
    rng = np.random.default_rng(9)
    n, w = 32, 8
    series = z_normalize_all(rng.normal(size=(100_000, n)).cumsum(axis=1))
    queries = z_normalize_all(rng.normal(size=(100_000, n)).cumsum(axis=1))
    symbols = isax_all(paa_all(series, w))
    qpaa = paa_all(queries, w)
    ed = np.sqrt(np.sum((series - queries) ** 2, axis=1))
    for bits in [1, 4, 8]:
        sym = symbols >> (8 - bits)
        bp = np.concatenate([[-np.inf], breakpoints(bits), [np.inf]])
        lo, hi = bp[sym], bp[sym + 1]
        lb = region_lower_bounds(qpaa, qpaa, lo, hi, n // w)
        assert (lb <= ed + 1e-9).all()


def test_cardinality_monotonicity():
    rng = np.random.default_rng(10)
    s, q = rng.normal(size=(2, 32))
    full = isax_from_paa(paa(s, 4), 8)
    qp = paa(q, 4)
    lbs = [
        lower_bound_distance(
            qp, ISaxWord.from_row(np.array(full.symbols, np.uint8), bits)
        )
        for bits in range(1, 9)
    ]
    assert all(b >= a - 1e-12 for a, b in zip(lbs, lbs[1:]))


def test_dtw_distance():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(2, 32))
    for r in [0, 1, 5]:
        assert dtw_distance(a, a, r) == 0
    assert dtw_distance(a, b, 0) == euclidean_distance(a, b)
    assert math.isclose(dtw_distance(a, b, 3), _dtw_oracle(a, b, 3))
    assert math.isclose(dtw_distance(a, b, 3), dtw_distance(b, a, 3))
    assert dtw_distance(a, b, 3) <= euclidean_distance(a, b)
    assert dtw_distance(a, b, 3, bound=1e-6) > 1e-6


def test_dtw_distance_matches_banded_dp():
    rng = np.random.default_rng(14)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        a, b = rng.normal(size=(2, n)).cumsum(axis=1)
        r = int(rng.integers(0, n))
        expect = _dtw_oracle(a, b, r)
        assert math.isclose(dtw_distance(a, b, r), expect, rel_tol=1e-9)
        # a bound at or above the answer never abandons
        got = dtw_distance(a, b, r, bound=expect * (1 + 1e-6))
        assert math.isclose(got, expect, rel_tol=1e-9)
        cut = dtw_distance(a, b, r, bound=expect / 2)
        assert cut == math.inf or math.isclose(cut, expect, rel_tol=1e-9)


def test_keogh_envelope():
    q = np.array([0.0, 3, 1, -2, 5])
    env = keogh_envelope(q, 1)
    assert list(env.upper) == [3, 3, 3, 5, 5]
    assert list(env.lower) == [0, 0, -2, -2, -2]
    wide = keogh_envelope(q, 4)
    assert (wide.upper == 5).all() and (wide.lower == -2).all()
    assert lb_keogh(env, np.array([1.0, 1, 1, 1, 1])) == 0
    try:
        keogh_envelope(q, 5)
    except InvalidInput:
        pass
    else:
        assert False


def test_lb_keogh_soundness_sweep():
    rng = np.random.default_rng(12)
    for _ in range(100_000):
        n = 16
        q, c = rng.normal(size=(2, n)).cumsum(axis=1)
        r = int(rng.integers(0, n))
        assert lb_keogh(keogh_envelope(q, r), c) <= dtw_distance(q, c, r) + 1e-9


def test_envelope_region_bound_is_dtw_lower_bound():
    rng = np.random.default_rng(13)
    n, w, r = 32, 4, 3
    for _ in range(500):
        q, c = rng.normal(size=(2, n)).cumsum(axis=1)
        upper, lower = keogh_envelope(q, r).segment_bounds(w)
        word = isax_from_paa(paa(c, w), 3)
        lo, hi = word.bounds()
        lb = region_lower_bounds(upper, lower, lo, hi, n // w)[0]
        assert lb <= dtw_distance(q, c, r) + 1e-9
