"""Replication topologies and data partitioning plans.

With N nodes and k replication groups, node j sits in cluster j // k and
group j % k. Every cluster holds the whole dataset split into k chunks;
every node of a group holds the same chunk.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from index import SummarizationBuffer, build_summarization_buffers
from lcg import Lcg64
from series import Collection, ISaxWord, InvalidInput

LAMBDA = 400
BALANCE_TOLERANCE = 0.05

log = logging.getLogger(__name__)


class InvalidConfig(ValueError):
    """A cluster or run configuration that cannot be realised."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class ClusterTopology:
    n_nodes: int
    k: int
    groups: tuple[tuple[int, ...], ...]
    clusters: tuple[tuple[int, ...], ...]
    group_coordinators: tuple[int, ...]

    @property
    def replication_degree(self) -> int:
        return self.n_nodes // self.k

    def group_of(self, node: int) -> int:
        return node % self.k

    def cluster_of(self, node: int) -> int:
        return node // self.k

    def peers(self, node: int) -> tuple[int, ...]:
        """The other nodes holding the same chunk."""
        return tuple(j for j in self.groups[self.group_of(node)] if j != node)

    def coordinator_of(self, node: int) -> int:
        return self.group_coordinators[self.group_of(node)]


def make_topology(n_nodes: int, k: int) -> ClusterTopology:
    if not is_power_of_two(n_nodes):
        raise InvalidConfig(f"node count {n_nodes} is not a power of two")
    if not is_power_of_two(k) or k > n_nodes:
        raise InvalidConfig(
            f"replication groups {k} not in 1, 2, ..., {n_nodes}"
        )
    groups = tuple(tuple(range(g, n_nodes, k)) for g in range(k))
    clusters = tuple(
        tuple(range(c * k, (c + 1) * k)) for c in range(n_nodes // k)
    )
    return ClusterTopology(
        n_nodes, k, groups, clusters, tuple(min(g) for g in groups)
    )


class Method(Enum):
    EQUALLY_SPLIT = "equally-split"
    EQUALLY_SPLIT_SHUFFLED = "equally-split-shuffled"
    DENSITY_AWARE = "density-aware"


@dataclass
class PartitionPlan:
    """Series ids of each chunk; chunk g goes to replication group g."""

    chunks: list[list[int]]
    method: Method
    seed: int | None = None
    lam: int | None = None
    split_buffers: list[int] = field(default_factory=list)  # root keys

    @property
    def n_chunks(self) -> int:
        return len(self.chunks)

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.chunks]

    def node_chunks(self, topology: ClusterTopology) -> list[list[int]]:
        if topology.k != self.n_chunks:
            raise InvalidConfig(
                f"plan has {self.n_chunks} chunks, "
                f"topology has {topology.k} groups"
            )
        return [
            self.chunks[topology.group_of(j)] for j in range(topology.n_nodes)
        ]

    def to_json(self) -> str:
        return json.dumps(
            {
                "method": self.method.value,
                "seed": self.seed,
                "lambda": self.lam,
                "split_buffers": self.split_buffers,
                "chunks": self.chunks,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> PartitionPlan:
        raw = json.loads(text)
        return cls(
            [list(map(int, c)) for c in raw["chunks"]],
            Method(raw["method"]),
            raw.get("seed"),
            raw.get("lambda"),
            raw.get("split_buffers", []),
        )

    def save(self, path: Path) -> None:
        path.write_text(self.to_json())

    @classmethod
    def load(cls, path: Path) -> PartitionPlan:
        return cls.from_json(path.read_text())

    def validate(self, n_series: int) -> None:
        """Chunks must be a disjoint cover of 0 .. n_series - 1."""
        seen = np.zeros(n_series, dtype=np.int64)
        for chunk in self.chunks:
            ids = np.asarray(chunk, dtype=np.int64)
            if ids.size and (ids.min() < 0 or ids.max() >= n_series):
                raise InvalidConfig("plan refers to series outside the dataset")
            np.add.at(seen, ids, 1)
        if not np.all(seen == 1):
            raise InvalidConfig(
                f"plan is not a disjoint cover: {int(np.sum(seen == 0))} "
                f"missing, {int(np.sum(seen > 1))} repeated"
            )


def equally_split(
    n_series: int, n_chunks: int, shuffle_seed: int | None = None
) -> PartitionPlan:
    assert n_chunks >= 1
    ids = list(range(n_series))
    method = Method.EQUALLY_SPLIT
    if shuffle_seed is not None:
        ids = Lcg64(shuffle_seed).shuffle(ids)
        method = Method.EQUALLY_SPLIT_SHUFFLED
    size, extra = divmod(n_series, n_chunks)
    chunks: list[list[int]] = []
    start = 0
    for i in range(n_chunks):
        stop = start + size + (1 if i < extra else 0)
        chunks.append(ids[start:stop])
        start = stop
    return PartitionPlan(chunks, method, shuffle_seed)


def gray_decode(v: int) -> int:
    ret = v
    while v := v >> 1:
        ret ^= v
    return ret


def gray_key(word: ISaxWord) -> int:
    """Position of a 1-bit-per-segment word in Gray-code order."""
    if any(bits != word.card_bits[0] for bits in word.card_bits):
        raise InvalidInput(f"mixed cardinalities in {word}")
    bits = word.card_bits[0]
    v = 0
    for symbol in word.symbols:
        v = (v << bits) | symbol
    return gray_decode(v)


def density_aware_partition(
    buffers: Sequence[SummarizationBuffer],
    n_chunks: int,
    lam: int = LAMBDA,
    balance_tolerance: float = BALANCE_TOLERANCE,
) -> PartitionPlan:
    """Spread similar series (same root buffer) across chunks.

    The lam largest buffers are dealt out series by series; the rest go
    whole, in Gray order, round-robin. While the chunk sizes spread by
    more than balance_tolerance times their mean, the largest whole
    buffer of the largest chunk is dealt out as well.
    """
    assert n_chunks >= 1 and lam >= 0
    keys = {buf.key: gray_key(buf.word) for buf in buffers}
    by_size = sorted(buffers, key=lambda b: (-len(b), keys[b.key]))
    split_ids: list[list[int]] = [[] for _ in range(n_chunks)]
    whole: list[list[SummarizationBuffer]] = [[] for _ in range(n_chunks)]
    split: list[int] = []
    cursor = 0

    def deal(buf: SummarizationBuffer) -> None:
        nonlocal cursor
        for i, sid in enumerate(buf.ids):
            split_ids[(cursor + i) % n_chunks].append(sid)
        cursor = (cursor + len(buf)) % n_chunks
        split.append(buf.key)

    for buf in by_size[:lam]:
        deal(buf)
    rest = sorted(by_size[lam:], key=lambda b: keys[b.key])
    for i, buf in enumerate(rest):
        whole[i % n_chunks].append(buf)

    def sizes() -> list[int]:
        return [
            len(split_ids[c]) + sum(len(b) for b in whole[c])
            for c in range(n_chunks)
        ]

    while max(s := sizes()) - min(s) > balance_tolerance * sum(s) / n_chunks:
        largest = int(np.argmax(s))
        if not whole[largest]:
            log.warning("chunks stay unbalanced: %s", s)
            break
        buf = max(whole[largest], key=lambda b: (len(b), -keys[b.key]))
        whole[largest].remove(buf)
        deal(buf)

    chunks = [
        sorted(split_ids[c] + [sid for b in whole[c] for sid in b.ids])
        for c in range(n_chunks)
    ]
    log.info(
        "density-aware plan: %d buffers, %d split, sizes %s",
        len(buffers),
        len(split),
        [len(c) for c in chunks],
    )
    return PartitionPlan(
        chunks, Method.DENSITY_AWARE, lam=lam, split_buffers=split
    )


def plan_partition(
    data: Collection,
    n_chunks: int,
    method: Method,
    w: int,
    seed: int = 0,
    lam: int = LAMBDA,
    balance_tolerance: float = BALANCE_TOLERANCE,
    n_workers: int = 1,
) -> PartitionPlan:
    if method is Method.EQUALLY_SPLIT:
        return equally_split(len(data), n_chunks)
    if method is Method.EQUALLY_SPLIT_SHUFFLED:
        return equally_split(len(data), n_chunks, seed)
    buffers = build_summarization_buffers(data, w, n_workers=n_workers)
    return density_aware_partition(buffers, n_chunks, lam, balance_tolerance)


@dataclass(frozen=True)
class PlanStats:
    sizes: list[int]
    imbalance: float  # (max - min) / mean chunk size
    collocated_neighbors: int  # root buffer pairs one bit apart, same chunk
    neighbor_pairs: int

    @classmethod
    def of(cls, plan: PartitionPlan, data: Collection, w: int) -> PlanStats:
        """Where did each root buffer's series land?"""
        buffers = build_summarization_buffers(data, w)
        chunk_of = np.empty(len(data), dtype=np.int64)
        for c, chunk in enumerate(plan.chunks):
            chunk_of[np.asarray(chunk, dtype=np.int64)] = c
        home: dict[int, set[int]] = {
            buf.key: set(chunk_of[buf.ids].tolist()) for buf in buffers
        }
        pairs = collocated = 0
        for key, chunks in home.items():
            for bit in range(w):
                other = key ^ (1 << bit)
                if other > key and other in home:
                    pairs += 1
                    collocated += bool(chunks & home[other])
        sizes = plan.sizes
        mean = sum(sizes) / len(sizes) if sizes else 0.0
        return cls(
            sizes,
            (max(sizes) - min(sizes)) / mean if mean else 0.0,
            collocated,
            pairs,
        )


# Unit tests


def test_make_topology():
    eq = make_topology(8, 8)
    assert eq.clusters == (tuple(range(8)),)
    assert eq.groups == tuple((j,) for j in range(8))
    full = make_topology(8, 1)
    assert full.groups == (tuple(range(8)),)
    assert len(full.clusters) == 8 and full.replication_degree == 8
    p4 = make_topology(8, 4)
    assert p4.groups == ((0, 4), (1, 5), (2, 6), (3, 7))
    assert p4.clusters == ((0, 1, 2, 3), (4, 5, 6, 7))
    assert p4.group_coordinators == (0, 1, 2, 3)
    assert p4.peers(5) == (1,) and p4.coordinator_of(6) == 2
    assert [p4.cluster_of(j) for j in range(8)] == [0] * 4 + [1] * 4
    for n, k in [(6, 2), (8, 3), (4, 8), (0, 1)]:
        try:
            make_topology(n, k)
        except InvalidConfig:
            pass
        else:
            assert False, f"accepted {n} nodes, k={k}"


def test_equally_split():
    assert equally_split(10, 2).chunks == [list(range(5)), list(range(5, 10))]
    assert equally_split(10, 3).sizes == [4, 3, 3]
    a, b = equally_split(1000, 4, 7), equally_split(1000, 4, 7)
    assert a.chunks == b.chunks and a.method is Method.EQUALLY_SPLIT_SHUFFLED
    assert sorted(sid for c in a.chunks for sid in c) == list(range(1000))
    assert a.chunks != equally_split(1000, 4).chunks
    a.validate(1000)


def test_every_cluster_covers_the_dataset():
    plan = equally_split(103, 4, 1)
    for n, k in [(4, 4), (8, 4), (16, 4)]:
        topology = make_topology(n, k)
        node_chunks = plan.node_chunks(topology)
        for cluster in topology.clusters:
            ids = [sid for j in cluster for sid in node_chunks[j]]
            assert sorted(ids) == list(range(103))
        stored = sum(len(c) for c in node_chunks)
        assert stored == 103 * topology.replication_degree


def _word(bits: str) -> ISaxWord:
    return ISaxWord(tuple(int(b) for b in bits), (1,) * len(bits))


def test_gray_key():
    assert gray_key(_word("000")) == 0
    for w in [3, 8, 12]:
        words = sorted(range(1 << w), key=lambda v: gray_decode(v))
        assert all(bin(a ^ b).count("1") == 1 for a, b in zip(words, words[1:]))
    try:
        gray_key(ISaxWord((0, 1), (1, 2)))
    except InvalidInput:
        pass
    else:
        assert False, "accepted mixed cardinalities"


def test_gray_order_spreads_neighbors():
    names = [format(v, "03b") for v in range(8)]
    by_gray = sorted(names, key=lambda s: gray_key(_word(s)))
    gray_node = {s: i % 4 for i, s in enumerate(by_gray)}
    binary_node = {s: i % 4 for i, s in enumerate(names)}
    assert binary_node["000"] == binary_node["100"]
    assert gray_node["000"] != gray_node["100"]
    for a in names:
        for b in names:
            if bin(int(a, 2) ^ int(b, 2)).count("1") == 1:
                assert gray_node[a] != gray_node[b]


def _walks(count: int, length: int, seed: int) -> Collection:
    from series import z_normalize_all

    rng = np.random.default_rng(seed)
    return z_normalize_all(rng.normal(size=(count, length)).cumsum(axis=1))


def test_density_aware_singletons_is_gray_round_robin():
    for count in [256, 250]:
        buffers = [SummarizationBuffer(key, 8, [key]) for key in range(count)]
        plan = density_aware_partition(buffers, 4, lam=0)
        assert max(plan.sizes) - min(plan.sizes) <= 1
        assert not plan.split_buffers
        by_gray = sorted(range(count), key=gray_decode)
        assert plan.chunks[1] == sorted(by_gray[1::4])


def test_density_aware_skewed_dataset():
    rng = np.random.default_rng(1)
    data = _walks(10_000, 32, 2)
    base = data[0]
    skewed = np.vstack(
        [base + rng.normal(0, 0.01, (9000, 32)), data[:1000]]
    ).astype(np.float64)
    buffers = build_summarization_buffers(skewed, 8)
    for lam in [0, 1, LAMBDA]:
        plan = density_aware_partition(buffers, 4, lam)
        plan.validate(len(skewed))
        sizes = plan.sizes
        spread = max(sizes) - min(sizes)
        assert spread <= BALANCE_TOLERANCE * sum(sizes) / 4
        assert max(buffers, key=len).key in plan.split_buffers
        for buf in buffers:
            if buf.key in plan.split_buffers:
                per_chunk = [
                    len(set(buf.ids) & set(chunk)) for chunk in plan.chunks
                ]
                assert max(per_chunk) <= -(-len(buf) // 4)


def test_balance_is_measured_against_the_mean_size():
    def two(first: int, second: int) -> list[SummarizationBuffer]:
        return [
            SummarizationBuffer(0, 8, list(range(first))),
            SummarizationBuffer(1, 8, list(range(first, first + second))),
        ]

    # 51 apart is within 5% of the mean 1025.5, though not of the min
    kept = density_aware_partition(two(1051, 1000), 2, lam=0)
    assert sorted(kept.sizes) == [1000, 1051] and not kept.split_buffers
    dealt = density_aware_partition(two(1100, 1000), 2, lam=0)
    assert dealt.sizes == [1050, 1050]
    assert sorted(dealt.split_buffers) == [0, 1]


def test_plan_json_round_trip(tmp_path: Path):
    plan = density_aware_partition(
        build_summarization_buffers(_walks(500, 32, 3), 8), 2, lam=3
    )
    plan.save(tmp_path / "plan.json")
    assert PartitionPlan.load(tmp_path / "plan.json") == plan
    try:
        PartitionPlan([[0, 1], [1]], Method.EQUALLY_SPLIT).validate(3)
    except InvalidConfig:
        pass
    else:
        assert False, "accepted an overlapping plan"


def test_plan_stats():
    data = _walks(4000, 32, 4)
    binary = equally_split(len(data), 4)
    stats = PlanStats.of(binary, data, 8)
    assert stats.sizes == [1000] * 4 and stats.imbalance == 0
    assert 0 <= stats.collocated_neighbors <= stats.neighbor_pairs
    dense = plan_partition(data, 4, Method.DENSITY_AWARE, 8, lam=0)
    assert PlanStats.of(dense, data, 8).imbalance <= BALANCE_TOLERANCE
