"""Per-node iSAX index: summarization buffers, tree, and RS-batches."""
from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
import json
import logging
from threading import Lock
import time
from typing import TYPE_CHECKING, Iterator

import numpy as np
import numpy.typing as npt

from series import (
    MAX_CARD_BITS,
    Bounds,
    Collection,
    ISaxWord,
    InvalidInput,
    SymbolMatrix,
    isax_all,
    paa_all,
)

if TYPE_CHECKING:
    from search import LeafQueue

LEAF_CAPACITY = 2000
FILL_BLOCK = 1024  # series claimed per fetch-and-add during buffer fill

IdArray = npt.NDArray[np.int64]

log = logging.getLogger(__name__)


class FetchAndAdd:
    """Shared counter; every call returns the value before the increment."""

    def __init__(self, value: int = 0):
        self._value = value
        self._lock = Lock()

    def __call__(self, delta: int = 1) -> int:
        with self._lock:
            ret = self._value
            self._value += delta
            return ret

    @property
    def value(self) -> int:
        return self._value


def root_keys(symbols: SymbolMatrix) -> IdArray:
    """Pack the top bit of every segment, segment 0 most significant."""
    w = symbols.shape[1]
    top = (symbols >> (MAX_CARD_BITS - 1)).astype(np.int64)
    return top @ (1 << np.arange(w - 1, -1, -1, dtype=np.int64))


def root_word(key: int, w: int) -> ISaxWord:
    return ISaxWord(
        tuple((key >> (w - 1 - i)) & 1 for i in range(w)), (1,) * w
    )


@dataclass(eq=False)
class SummarizationBuffer:
    key: int
    w: int
    ids: list[int] = field(default_factory=list)
    symbols: SymbolMatrix = field(
        default_factory=lambda: np.empty((0, 0), dtype=np.uint8)
    )
    lock: Lock = field(default_factory=Lock, repr=False)

    @property
    def word(self) -> ISaxWord:
        return root_word(self.key, self.w)

    def __len__(self) -> int:
        return len(self.ids)

    def entries(self) -> Iterator[tuple[int, ISaxWord]]:
        for i, row in zip(self.ids, self.symbols):
            yield i, ISaxWord.from_row(row, MAX_CARD_BITS)


def build_summarization_buffers(
    chunk: Collection,
    w: int,
    max_card_bits: int = MAX_CARD_BITS,
    n_workers: int = 1,
) -> list[SummarizationBuffer]:
    """Summarise a chunk in parallel and group series by root word.

    Workers claim FILL_BLOCK-sized ranges through a shared counter; each
    buffer append is guarded by that buffer's lock. Buffers come back in
    root-key order with ids sorted, whatever the worker count.
    """
    if chunk.ndim != 2 or len(chunk) == 0:
        raise InvalidInput(f"need a non-empty 2-D chunk, got {chunk.shape}")
    if max_card_bits != MAX_CARD_BITS:
        raise InvalidInput(f"indexes are built at {MAX_CARD_BITS} bits")
    symbols = np.empty((len(chunk), w), dtype=np.uint8)
    buffers: dict[int, SummarizationBuffer] = {}
    buffers_lock = Lock()
    claim = FetchAndAdd()

    def get_buffer(key: int) -> SummarizationBuffer:
        with buffers_lock:
            if key not in buffers:
                buffers[key] = SummarizationBuffer(key, w)
            return buffers[key]

    def fill() -> None:
        while (start := claim(FILL_BLOCK)) < len(chunk):
            stop = min(start + FILL_BLOCK, len(chunk))
            block = isax_all(paa_all(chunk[start:stop], w), max_card_bits)
            symbols[start:stop] = block
            keys = root_keys(block)
            for key in np.unique(keys):
                buf = get_buffer(int(key))
                members = (np.flatnonzero(keys == key) + start).tolist()
                with buf.lock:
                    buf.ids.extend(members)

    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        for future in [pool.submit(fill) for _ in range(n_workers)]:
            future.result()

    ret = [buffers[key] for key in sorted(buffers)]
    for buf in ret:
        buf.ids.sort()
        buf.symbols = symbols[buf.ids]
    log.debug("filled %d buffers from %d series", len(ret), len(chunk))
    return ret


@dataclass(eq=False)
class Node:
    word: ISaxWord
    lo: Bounds
    hi: Bounds
    depth: int
    ids: IdArray | None = None  # local row numbers, leaves only
    children: tuple[Node, Node] | None = None
    split_segment: int = -1
    leaf_id: int = -1
    leaf_count: int = 1
    overflow: bool = False

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    @property
    def size(self) -> int:
        if self.children is None:
            assert self.ids is not None
            return len(self.ids)
        return sum(child.size for child in self.children)

    def leaves(self) -> Iterator[Node]:
        if self.children is None:
            yield self
        else:
            for child in self.children:
                yield from child.leaves()

    def nodes(self) -> Iterator[Node]:
        yield self
        for child in self.children or ():
            yield from child.nodes()


def split_segment(word: ISaxWord, depth: int) -> int | None:
    """Round-robin by depth over segments not yet at max cardinality."""
    w = word.w
    for i in range(w):
        seg = (depth + i) % w
        if word.card_bits[seg] < MAX_CARD_BITS:
            return seg
    return None


def build_subtree(
    word: ISaxWord,
    ids: IdArray,
    symbols: SymbolMatrix,
    leaf_capacity: int,
    depth: int = 0,
) -> Node:
    lo, hi = word.bounds()
    if len(ids) <= leaf_capacity:
        return Node(word, lo, hi, depth, ids=ids)
    seg = split_segment(word, depth)
    if seg is None:  # all segments at max cardinality
        return Node(word, lo, hi, depth, ids=ids, overflow=True)
    shift = MAX_CARD_BITS - (word.card_bits[seg] + 1)
    upper = ((symbols[:, seg] >> shift) & 1).astype(bool)
    children = tuple(
        build_subtree(
            word.promote(seg, bit),
            ids[mask],
            symbols[mask],
            leaf_capacity,
            depth + 1,
        )
        for bit, mask in [(0, ~upper), (1, upper)]
    )
    left, right = children
    node = Node(word, lo, hi, depth, children=(left, right), split_segment=seg)
    node.leaf_count = sum(1 for _ in node.leaves())
    return node


@dataclass(eq=False)
class IndexTree:
    roots: dict[int, Node]
    leaf_capacity: int
    data: Collection  # the chunk, one series per row
    ids: IdArray  # global series id of every row
    w: int
    root_lo: Bounds = field(init=False, repr=False)
    root_hi: Bounds = field(init=False, repr=False)
    leaves: list[Node] = field(init=False, repr=False)

    def __post_init__(self):
        self.roots = {key: self.roots[key] for key in sorted(self.roots)}
        roots = list(self.roots.values())
        self.root_lo = np.array([r.lo for r in roots]).reshape(-1, self.w)
        self.root_hi = np.array([r.hi for r in roots]).reshape(-1, self.w)
        self.leaves = [leaf for r in roots for leaf in r.leaves()]
        for leaf_id, leaf in enumerate(self.leaves):
            leaf.leaf_id = leaf_id

    @property
    def length(self) -> int:
        return int(self.data.shape[1])

    @property
    def segment_width(self) -> int:
        return self.length // self.w

    @property
    def root_keys(self) -> list[int]:
        return list(self.roots)

    @property
    def node_count(self) -> int:
        return sum(1 for r in self.roots.values() for _ in r.nodes())

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    def signature(self) -> list[tuple[str, tuple[int, ...]]]:
        """Leaf words and contents in tree order, for shape comparisons."""
        ret = []
        for leaf in self.leaves:
            assert leaf.ids is not None
            ret.append((str(leaf.word), tuple(sorted(leaf.ids.tolist()))))
        return ret


def build_index_tree(
    buffers: list[SummarizationBuffer],
    data: Collection,
    ids: IdArray | None = None,
    leaf_capacity: int = LEAF_CAPACITY,
    n_workers: int = 1,
) -> IndexTree:
    """One independent subtree per buffer, built in parallel."""
    if leaf_capacity < 1:
        raise InvalidInput(f"leaf capacity {leaf_capacity} < 1")
    if ids is None:
        ids = np.arange(len(data), dtype=np.int64)

    def build(buf: SummarizationBuffer) -> tuple[int, Node]:
        rows = np.array(buf.ids, dtype=np.int64)
        return buf.key, build_subtree(
            buf.word, rows, buf.symbols, leaf_capacity
        )

    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        roots = dict(pool.map(build, buffers))
    w = buffers[0].w if buffers else 1
    return IndexTree(roots, leaf_capacity, data, ids, w)


@dataclass(frozen=True)
class BuildTimes:
    buffer_s: float
    tree_s: float


def build_index(
    chunk: Collection,
    ids: IdArray,
    w: int,
    leaf_capacity: int = LEAF_CAPACITY,
    n_workers: int = 1,
) -> tuple[IndexTree, BuildTimes]:
    t0 = time.perf_counter()
    buffers = build_summarization_buffers(chunk, w, n_workers=n_workers)
    t1 = time.perf_counter()
    tree = build_index_tree(buffers, chunk, ids, leaf_capacity, n_workers)
    t2 = time.perf_counter()
    log.info(
        "indexed %d series: %d roots, %d leaves (%.3fs + %.3fs)",
        len(chunk),
        len(tree.roots),
        tree.leaf_count,
        t1 - t0,
        t2 - t1,
    )
    return tree, BuildTimes(t1 - t0, t2 - t1)


@dataclass(eq=False)
class RsBatch:
    """A run of consecutive root subtrees, plus its per-query state."""

    id: int
    root_keys: tuple[int, ...]
    first_root: int  # position of root_keys[0] in the tree's root order
    complete: bool = False
    helped: FetchAndAdd = field(default_factory=FetchAndAdd)
    next_root: FetchAndAdd = field(default_factory=FetchAndAdd)
    queues: list[LeafQueue] = field(default_factory=list)
    lock: Lock = field(default_factory=Lock, repr=False)

    def fresh(self) -> RsBatch:
        return RsBatch(self.id, self.root_keys, self.first_root)


def partition_rs_batches(tree: IndexTree, n_sb: int) -> list[RsBatch]:
    """Split the sorted roots into n_sb runs, remainder to the front."""
    if n_sb < 1:
        raise InvalidInput(f"need at least one RS-batch, got {n_sb}")
    keys = tree.root_keys
    if not keys:
        raise InvalidInput("cannot batch a tree with no roots")
    size, extra = divmod(len(keys), n_sb)
    ret: list[RsBatch] = []
    start = 0
    for i in range(n_sb):
        stop = start + size + (1 if i < extra else 0)
        ret.append(RsBatch(i, tuple(keys[start:stop]), start))
        start = stop
    return ret


@dataclass(frozen=True)
class IndexStats:
    series: int
    roots: int
    nodes: int
    leaves: int
    overflow_leaves: int
    max_depth: int
    leaf_fill: dict[str, int]  # leaves per tenth of leaf_capacity

    @classmethod
    def of(cls, tree: IndexTree) -> IndexStats:
        fill: Counter[str] = Counter()
        for leaf in tree.leaves:
            tenth = min(9, leaf.size * 10 // tree.leaf_capacity)
            fill[f"{tenth * 10}-{tenth * 10 + 10}%"] += 1
        return cls(
            series=len(tree.data),
            roots=len(tree.roots),
            nodes=tree.node_count,
            leaves=tree.leaf_count,
            overflow_leaves=sum(leaf.overflow for leaf in tree.leaves),
            max_depth=max((leaf.depth for leaf in tree.leaves), default=0),
            leaf_fill=dict(sorted(fill.items())),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


# Unit tests


def _walks(count: int, length: int, seed: int) -> Collection:
    rng = np.random.default_rng(seed)
    walks = rng.normal(size=(count, length)).cumsum(axis=1)
    mean = walks.mean(axis=1, keepdims=True)
    return (walks - mean) / walks.std(axis=1, keepdims=True)


def test_single_series_single_buffer():
    buffers = build_summarization_buffers(_walks(1, 16, 0), 4)
    assert len(buffers) == 1 and buffers[0].ids == [0]


def test_opposite_series_get_distinct_buffers():
    chunk = np.array([[1.0, 1, -1, -1], [-1.0, -1, 1, 1]])
    buffers = build_summarization_buffers(chunk, 2)
    assert [b.key for b in buffers] == [0b01, 0b10]
    for buf in buffers:
        for i, word in buf.entries():
            assert buf.word.contains(np.array(word.symbols, np.uint8))


def test_buffers_match_sequential_build():
    chunk = _walks(10_000, 64, 1)
    one = build_summarization_buffers(chunk, 16, n_workers=1)
    many = build_summarization_buffers(chunk, 16, n_workers=8)
    assert [(b.key, b.ids) for b in one] == [(b.key, b.ids) for b in many]
    assert sorted(i for b in one for i in b.ids) == list(range(len(chunk)))
    for buf in one:
        assert (root_keys(buf.symbols) == buf.key).all()


def test_single_leaf_tree():
    chunk = np.tile(np.linspace(-1, 1, 16), (50, 1))
    tree = build_index_tree(build_summarization_buffers(chunk, 4), chunk)
    assert len(tree.roots) == 1 and tree.leaf_count == 1
    assert tree.leaves[0].size == 50


def test_forced_split_ends_in_overflow_leaf():
    chunk = np.tile(np.linspace(-1, 1, 8), (2, 1))
    tree = build_index_tree(
        build_summarization_buffers(chunk, 2), chunk, leaf_capacity=1
    )
    overflow = [leaf for leaf in tree.leaves if leaf.overflow]
    assert len(overflow) == 1 and overflow[0].size == 2
    assert overflow[0].word.card_bits == (MAX_CARD_BITS, MAX_CARD_BITS)
    assert all(leaf.size == 0 for leaf in tree.leaves if not leaf.overflow)


def test_full_tree_audit():
    chunk = _walks(20_000, 64, 2)
    buffers = build_summarization_buffers(chunk, 8, n_workers=4)
    tree = build_index_tree(buffers, chunk, leaf_capacity=50, n_workers=4)
    symbols = isax_all(paa_all(chunk, 8))
    seen = []
    for leaf in tree.leaves:
        assert leaf.ids is not None
        assert leaf.size <= 50 or leaf.overflow
        for i in leaf.ids:
            assert leaf.word.contains(symbols[i])
        seen.extend(leaf.ids.tolist())
    assert sorted(seen) == list(range(len(chunk)))
    for root in tree.roots.values():
        for node in root.nodes():
            if node.children is not None:
                left, right = node.children
                seg = node.split_segment
                assert left.word == node.word.promote(seg, 0)
                assert right.word == node.word.promote(seg, 1)


def test_tree_is_independent_of_worker_count():
    chunk = _walks(5000, 64, 3)
    trees = [
        build_index_tree(
            build_summarization_buffers(chunk, 8, n_workers=n),
            chunk,
            leaf_capacity=20,
            n_workers=n,
        )
        for n in [1, 8]
    ]
    assert trees[0].signature() == trees[1].signature()


def test_build_scales_with_data():
    small, large = _walks(20_000, 64, 4), _walks(40_000, 64, 5)
    ids = np.arange(40_000, dtype=np.int64)
    build_index(small, ids[:20_000], 8, leaf_capacity=100)  # warm up
    _, times = build_index(small, ids[:20_000], 8, 100)
    t_small = times.buffer_s + times.tree_s
    _, times = build_index(large, ids, 8, 100)
    t_large = times.buffer_s + times.tree_s
    assert t_large <= 2.5 * t_small + 0.05


def test_partition_rs_batches():
    def sizes(n_roots: int, n_sb: int) -> list[int]:
        chunk = np.zeros((n_roots, 4))
        for i in range(n_roots):  # one root per series
            chunk[i] = [1 if i >> (3 - s) & 1 else -1 for s in range(4)]
        tree = build_index_tree(build_summarization_buffers(chunk, 4), chunk)
        batches = partition_rs_batches(tree, n_sb)
        keys = [k for b in batches for k in b.root_keys]
        assert keys == tree.root_keys
        return [len(b.root_keys) for b in batches]

    assert sizes(8, 4) == [2, 2, 2, 2]
    assert sizes(5, 4) == [2, 1, 1, 1]
    empty = IndexTree({}, 1, np.zeros((0, 4)), np.zeros(0, np.int64), 4)
    try:
        partition_rs_batches(empty, 1)
    except InvalidInput:
        pass
    else:
        assert False


def test_index_stats_json():
    chunk = _walks(2000, 32, 6)
    tree = build_index_tree(
        build_summarization_buffers(chunk, 8), chunk, leaf_capacity=10
    )
    stats = IndexStats.of(tree)
    assert stats.series == 2000 and stats.leaves == tree.leaf_count
    assert sum(stats.leaf_fill.values()) == stats.leaves
    assert json.loads(stats.to_json())["roots"] == len(tree.roots)
