"""Exact single-node query answering over an iSAX index.

QuerySearch holds the shared state of one query (BSF cell, RS-batch
cursors, priority queues) and exposes the worker steps: claim a root,
traverse it, preprocess the queues, claim a queue, process it. The
threaded answer_query() runs those steps on a real worker pool; the
cluster simulation drives the very same steps on virtual workers.
"""
from __future__ import annotations

from bisect import insort
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from heapq import heappop, heappush
import json
import logging
import math
import statistics
import sys
from threading import Barrier, BrokenBarrierError, Lock
import time
from typing import Callable, Iterable

import numpy as np
from scipy.stats import spearmanr

from index import (
    FetchAndAdd,
    IndexTree,
    Node,
    RsBatch,
    build_index,
    partition_rs_batches,
    root_keys,
)
from predict import (
    CalibrationSample,
    SigmoidParams,
    fit_linear,
    predict_time,
)
from series import (
    Bounds,
    Collection,
    Envelope,
    InvalidInput,
    PaaSummary,
    Series,
    dtw_distance,
    euclidean_distances,
    isax_all,
    keogh_envelope,
    lb_keogh_all,
    paa,
    region_lower_bounds,
    z_normalize_all,
)

TH_FLOOR = 32
TH_DIVISOR = 16
HELP_TH = 2
UNBOUNDED = sys.maxsize

log = logging.getLogger(__name__)

ImproveHook = Callable[[float], None]


@dataclass(frozen=True)
class SearchMode:
    k: int = 1
    dtw_window: int = 0  # warping window in points; 0 means Euclidean

    def __post_init__(self):
        if self.k < 1 or self.dtw_window < 0:
            raise InvalidInput(f"bad search mode {self}")

    @property
    def dtw(self) -> bool:
        return self.dtw_window > 0

    def __str__(self) -> str:
        if self.dtw:
            return f"dtw({self.dtw_window})" + (
                f"+knn({self.k})" if self.k > 1 else ""
            )
        return "1nn" if self.k == 1 else f"knn({self.k})"


@dataclass(frozen=True)
class Query:
    id: int
    series: Series
    paa: PaaSummary
    upper: Bounds  # per-segment bounds used against iSAX regions
    lower: Bounds
    envelope: Envelope | None = None

    @classmethod
    def prepare(
        cls, qid: int, series: Series, w: int, mode: SearchMode = SearchMode()
    ) -> Query:
        p = paa(series, w)
        if not mode.dtw:
            return cls(qid, series, p, p.means, p.means)
        env = keogh_envelope(series, mode.dtw_window)
        upper, lower = env.segment_bounds(w)
        return cls(qid, series, p, upper, lower, env)

    @property
    def root_key(self) -> int:
        return int(root_keys(isax_all(self.paa.means[np.newaxis, :]))[0])


@dataclass(frozen=True)
class Work:
    """Counted operations; the simulator turns them into virtual time."""

    lower_bounds: int = 0
    distances: int = 0  # Euclidean distances and LB_Keogh checks
    warps: int = 0  # DTW dynamic programmes

    def __add__(self, other: Work) -> Work:
        return Work(
            self.lower_bounds + other.lower_bounds,
            self.distances + other.distances,
            self.warps + other.warps,
        )


@dataclass(frozen=True)
class SimCosts:
    """Virtual cost of each operation and message, in distance units."""

    lower_bound: float = 0.125
    distance: float = 1.0
    preprocess_per_queue: float = 0.01
    summarize: float = 0.2  # per series, PAA + iSAX
    insert: float = 0.1  # per series, tree placement
    latency: float = 5.0  # per message
    steal_backoff: float = 20.0  # after an empty steal grant

    def units(self, work: Work, window: int = 0) -> float:
        return (
            work.lower_bounds * self.lower_bound
            + work.distances * self.distance
            + work.warps * self.distance * (2 * window + 1)
        )


class Bsf:
    """Best-so-far cell shared by the workers of one query.

    Keeps the k best (distance, series id) pairs found locally plus an
    external limit (shared by other nodes or granted with stolen work).
    The pruning value is the k-th best distance, capped by the limit.
    """

    def __init__(self, k: int = 1, limit: float = math.inf):
        self.k = k
        self.limit = limit
        self.best: list[tuple[float, int]] = []
        self.history: list[float] = [self.value]
        self._ids: set[int] = set()
        self._lock = Lock()

    @property
    def value(self) -> float:
        kth = self.best[self.k - 1][0] if len(self.best) == self.k else math.inf
        return min(kth, self.limit)

    @property
    def distance(self) -> float:
        return self.best[0][0] if self.best else math.inf

    @property
    def series_id(self) -> int | None:
        return self.best[0][1] if self.best else None

    def neighbors(self) -> list[tuple[float, int]]:
        return list(self.best)

    def _insert(self, dist: float, sid: int) -> None:
        insort(self.best, (dist, sid))
        self._ids.add(sid)
        if len(self.best) > self.k:
            _, dropped = self.best.pop()
            self._ids.discard(dropped)

    def offer(self, dist: float, sid: int) -> bool:
        return self.offer_many([dist], [sid])

    def offer_many(self, dists: Iterable[float], sids: Iterable[int]) -> bool:
        """Fold candidates in; returns whether the pruning value dropped."""
        with self._lock:
            before = self.value
            for dist, sid in zip(dists, sids):
                if dist < self.value and sid not in self._ids:
                    self._insert(float(dist), int(sid))
            if self.value < before:
                self.history.append(self.value)
                return True
            return False

    def tighten(self, bound: float) -> bool:
        with self._lock:
            before = self.value
            self.limit = min(self.limit, bound)
            if self.value < before:
                self.history.append(self.value)
                return True
            return False


class LeafQueue:
    """Min-heap of (lower bound, leaf) holding at most TH leaves."""

    def __init__(self, owner_batch: int, capacity: int, seq: int = 0):
        assert capacity >= 1
        self.owner_batch = owner_batch
        self.capacity = capacity
        self.seq = seq  # creation order within the batch
        self.entries: list[tuple[float, int, Node]] = []
        self.sealed = False
        self.stolen = False
        self.position = -1  # index in the sorted PQueues array
        self.lock = Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def __repr__(self) -> str:
        return (
            f"LeafQueue(batch={self.owner_batch}, seq={self.seq}, "
            f"size={len(self)}, top={self.top:.4g})"
        )

    @property
    def top(self) -> float:
        return self.entries[0][0] if self.entries else math.inf

    def push(self, lb: float, leaf: Node) -> None:
        assert not self.sealed
        heappush(self.entries, (lb, leaf.leaf_id, leaf))
        if len(self.entries) >= self.capacity:
            self.sealed = True

    def pop_below(self, bound: float) -> tuple[float, Node] | None:
        with self.lock:
            if not self.entries or self.entries[0][0] >= bound:
                return None
            lb, _, leaf = heappop(self.entries)
            return lb, leaf


def preprocess_queues(batches: Iterable[RsBatch]) -> list[LeafQueue]:
    """All non-empty queues, ascending by the lower bound of their top."""
    queues = [q for b in batches for q in b.queues if len(q)]
    queues.sort(key=lambda q: (q.top, q.owner_batch, q.seq))
    for pos, q in enumerate(queues):
        q.position = pos
    return queues


def threshold_for_query(
    initial_bsf: float,
    params: SigmoidParams,
    divisor: float = TH_DIVISOR,
    floor: int = TH_FLOOR,
) -> int:
    assert divisor >= 1
    estimate = params(initial_bsf)
    if not math.isfinite(estimate):
        return floor
    return max(floor, round(estimate / divisor))


@dataclass(frozen=True)
class Threshold:
    """How TH is picked per query: fixed, sigmoid-derived, or unbounded."""

    sigmoid: SigmoidParams | None = None
    divisor: float = TH_DIVISOR
    floor: int = TH_FLOOR
    fixed: int | None = None

    def for_query(self, initial_bsf: float) -> int:
        if self.fixed is not None:
            return self.fixed
        if self.sigmoid is None:
            return UNBOUNDED
        return threshold_for_query(
            initial_bsf, self.sigmoid, self.divisor, self.floor
        )


def evaluate_leaf(
    query: Query, tree: IndexTree, leaf: Node, bsf: Bsf, mode: SearchMode
) -> Work:
    """Real distances for every series of a leaf, folded into the BSF."""
    assert leaf.ids is not None
    rows = leaf.ids
    data = tree.data[rows]
    if not mode.dtw:
        bsf.offer_many(euclidean_distances(data, query.series), tree.ids[rows])
        return Work(distances=len(rows))
    assert query.envelope is not None
    keogh = lb_keogh_all(query.envelope, data)
    warps = 0
    for j in np.argsort(keogh, kind="stable"):
        if keogh[j] >= bsf.value:
            break
        warps += 1
        d = dtw_distance(query.series, data[j], mode.dtw_window, bsf.value)
        bsf.offer(d, int(tree.ids[rows[j]]))
    return Work(distances=len(rows), warps=warps)


def approx_leaf(query: Query, tree: IndexTree) -> tuple[Node, Work]:
    """Descend to the leaf whose region holds (or is nearest to) the query."""
    if not tree.roots:
        raise InvalidInput("cannot search an empty tree")
    work = Work()
    node = tree.roots.get(query.root_key)
    if node is None:
        lbs = region_lower_bounds(
            query.upper,
            query.lower,
            tree.root_lo,
            tree.root_hi,
            tree.segment_width,
        )
        work += Work(lower_bounds=len(lbs))
        node = list(tree.roots.values())[int(np.argmin(lbs))]
    while node.children is not None:
        seg = node.split_segment
        child_bits = node.children[0].word.card_bits[seg]
        qsym = isax_all(query.paa.means[seg : seg + 1], child_bits)[0]
        qbit = int(qsym) & 1

        def rank(bit_child: tuple[int, Node]) -> tuple[bool, float, bool]:
            bit, child = bit_child
            lb = region_lower_bounds(
                query.upper, query.lower, child.lo, child.hi, tree.segment_width
            )[0]
            return child.size == 0, float(lb), bit != qbit

        _, node = min(enumerate(node.children), key=rank)
        work += Work(lower_bounds=2)
    return node, work


def approx_search(
    query: Query, tree: IndexTree, mode: SearchMode = SearchMode()
) -> tuple[Bsf, Work]:
    leaf, work = approx_leaf(query, tree)
    bsf = Bsf(mode.k)
    return bsf, work + evaluate_leaf(query, tree, leaf, bsf, mode)


class Phase(Enum):
    TRAVERSAL = "traversal"
    PROCESSING = "processing"


@dataclass
class Cursor:
    """One worker's position in the tree traversal phase."""

    batch: RsBatch | None = None
    own_done: bool = False  # no RS-batch left to claim for itself
    help_from: int = 0  # next batch to consider helping


@dataclass
class QueryStats:
    query_id: int
    initial_bsf: float
    distance: float = math.inf
    series_id: int | None = None
    th: int = 0
    traversal_us: int = 0
    preprocess_us: int = 0
    processing_us: int = 0
    queues: int = 0
    median_queue_size: float = 0.0
    max_queue_size: int = 0
    leaves: int = 0
    visited_leaves: int = 0
    pruned_leaves: int = 0
    lower_bounds: int = 0
    real_distances: int = 0
    warps: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class QuerySearch:
    def __init__(
        self,
        query: Query,
        tree: IndexTree,
        batches: list[RsBatch],
        bsf: Bsf,
        th: int,
        mode: SearchMode = SearchMode(),
        help_th: int = HELP_TH,
        on_improve: ImproveHook | None = None,
        cutoff: bool = True,
    ):
        self.query = query
        self.tree = tree
        self.batches = [b.fresh() for b in batches]
        self.bsf = bsf
        self.th = th
        self.mode = mode
        self.help_th = help_th
        self.on_improve = on_improve
        self.cutoff = cutoff  # stop a queue once its top reaches the BSF
        self.phase = Phase.TRAVERSAL
        self.bcnt = FetchAndAdd()
        self.pqcnt = FetchAndAdd()
        self.pqueues: list[LeafQueue] = []
        self.tot_pq = 0
        self.stolen: set[int] = set()
        self.evaluated: list[int] = []  # leaf ids, in evaluation order
        self.work = Work()
        self.queue_sizes: list[int] = []
        self._lock = Lock()
        self.root_lbs = region_lower_bounds(
            query.upper, query.lower, tree.root_lo, tree.root_hi, self.seg
        )

    @property
    def seg(self) -> int:
        return self.tree.segment_width

    def _account(self, work: Work) -> Work:
        with self._lock:
            self.work += work
        return work

    # Tree traversal phase

    def claim_root(self, cursor: Cursor) -> tuple[RsBatch, int] | None:
        while True:
            batch = cursor.batch
            if batch is not None:
                i = batch.next_root()
                if i < len(batch.root_keys):
                    return batch, i
                batch.complete = True
                cursor.batch = None
            if not cursor.own_done:
                b = self.bcnt()
                if b < len(self.batches):
                    cursor.batch = self.batches[b]
                    continue
                cursor.own_done = True
            while cursor.help_from < len(self.batches):
                batch = self.batches[cursor.help_from]
                cursor.help_from += 1
                if not batch.complete and batch.helped() < self.help_th:
                    cursor.batch = batch
                    break
            else:
                return None

    def traverse_root(self, batch: RsBatch, i: int) -> Work:
        pos = batch.first_root + i
        lb = float(self.root_lbs[pos])
        work = Work(lower_bounds=1)
        if lb < self.bsf.value:
            root = self.tree.roots[batch.root_keys[i]]
            work += self._descend(root, lb, batch)
        return self._account(work)

    def _descend(self, node: Node, lb: float, batch: RsBatch) -> Work:
        if node.children is None:
            if node.size:
                self._enqueue(batch, lb, node)
            return Work()
        work = Work(lower_bounds=2)
        for child in node.children:
            q = self.query
            clb = float(
                region_lower_bounds(
                    q.upper, q.lower, child.lo, child.hi, self.seg
                )[0]
            )
            if clb < self.bsf.value:
                work += self._descend(child, clb, batch)
        return work

    def _enqueue(self, batch: RsBatch, lb: float, leaf: Node) -> None:
        with batch.lock:
            if not batch.queues or batch.queues[-1].sealed:
                batch.queues.append(
                    LeafQueue(batch.id, self.th, len(batch.queues))
                )
            batch.queues[-1].push(lb, leaf)

    def process_rs_batch(self, batch: RsBatch) -> Work:
        """Traverse every remaining root of one batch on this thread."""
        work = Work()
        while (i := batch.next_root()) < len(batch.root_keys):
            work += self.traverse_root(batch, i)
        batch.complete = True
        return work

    # Priority queue preprocessing phase

    def preprocess(self) -> None:
        with self._lock:
            self.pqueues = preprocess_queues(self.batches)
            self.tot_pq = len(self.pqueues)
            self.queue_sizes = [len(q) for q in self.pqueues]
            self.phase = Phase.PROCESSING

    # Priority queue processing phase

    def next_queue(self) -> LeafQueue | None:
        while (i := self.pqcnt()) < self.tot_pq:
            queue = self.pqueues[i]
            with self._lock:
                if queue.stolen:
                    continue
            return queue
        return None

    def process_leaf(self, queue: LeafQueue) -> Work | None:
        """Evaluate the queue's top leaf; None once it is empty or cut off."""
        bound = self.bsf.value if self.cutoff else math.inf
        popped = queue.pop_below(bound)
        if popped is None:
            return None
        lb, leaf = popped
        if lb >= self.bsf.value:  # pruned since it was enqueued
            return Work()
        before = self.bsf.value
        work = evaluate_leaf(self.query, self.tree, leaf, self.bsf, self.mode)
        with self._lock:
            self.evaluated.append(leaf.leaf_id)
        if self.bsf.value < before and self.on_improve is not None:
            self.on_improve(self.bsf.value)
        return self._account(work)

    def process_queue(self, queue: LeafQueue) -> Work:
        work = Work()
        while (step := self.process_leaf(queue)) is not None:
            work += step
        return work

    def give_away(self, n_send: int) -> list[int]:
        """Mark up to n_send batches stolen, per the Take-Away Property.

        Eligible batches are not yet stolen and none of their queues has
        been claimed; the ones whose first queue sits rightmost in the
        sorted queue array go first.
        """
        with self._lock:
            if self.phase is not Phase.PROCESSING:
                return []
            claimed = self.pqcnt.value
            first: dict[int, int] = {}
            for q in self.pqueues:
                first.setdefault(q.owner_batch, q.position)
            eligible = [
                b
                for b, pos in first.items()
                if b not in self.stolen and pos >= claimed
            ]
            eligible.sort(key=lambda b: first[b], reverse=True)
            chosen = eligible[:n_send]
            for q in self.pqueues:
                if q.owner_batch in chosen:
                    q.stolen = True
            self.stolen.update(chosen)
            return chosen

    def stats(self, initial_bsf: float) -> QueryStats:
        leaves = sum(
            self.tree.roots[key].leaf_count
            for b in self.batches
            for key in b.root_keys
        )
        return QueryStats(
            query_id=self.query.id,
            initial_bsf=initial_bsf,
            distance=self.bsf.distance,
            series_id=self.bsf.series_id,
            th=self.th,
            queues=self.tot_pq,
            median_queue_size=(
                statistics.median(self.queue_sizes) if self.queue_sizes else 0
            ),
            max_queue_size=max(self.queue_sizes, default=0),
            leaves=leaves,
            visited_leaves=len(self.evaluated),
            pruned_leaves=leaves - len(self.evaluated),
            lower_bounds=self.work.lower_bounds,
            real_distances=self.work.distances,
            warps=self.work.warps,
        )


def search_worker(search: QuerySearch, barrier: Barrier) -> None:
    try:
        cursor = Cursor()
        while (claim := search.claim_root(cursor)) is not None:
            search.traverse_root(*claim)
        barrier.wait()  # the barrier action runs preprocess()
        while (queue := search.next_queue()) is not None:
            search.process_queue(queue)
    except BrokenBarrierError:
        raise
    except BaseException:
        barrier.abort()
        raise


def answer_query(
    query: Query,
    tree: IndexTree,
    batches: list[RsBatch],
    n_threads: int = 1,
    threshold: Threshold = Threshold(),
    mode: SearchMode = SearchMode(),
    help_th: int = HELP_TH,
    initial_bsf_override: float = math.inf,
    on_improve: ImproveHook | None = None,
    cutoff: bool = True,
) -> tuple[Bsf, QueryStats]:
    t0 = time.perf_counter_ns()
    bsf, approx_work = approx_search(query, tree, mode)
    initial_bsf = bsf.value
    bsf.tighten(initial_bsf_override)
    th = threshold.for_query(initial_bsf)
    search = QuerySearch(
        query, tree, batches, bsf, th, mode, help_th, on_improve, cutoff
    )
    search.work += approx_work
    stamps: dict[str, int] = {"start": t0}

    def preprocess() -> None:
        stamps["traversed"] = time.perf_counter_ns()
        search.preprocess()
        stamps["preprocessed"] = time.perf_counter_ns()

    barrier = Barrier(n_threads, action=preprocess)
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        futures = [
            pool.submit(search_worker, search, barrier)
            for _ in range(n_threads)
        ]
        for future in futures:
            future.result()
    done = time.perf_counter_ns()

    stats = search.stats(initial_bsf)
    stats.traversal_us = (stamps["traversed"] - t0) // 1000
    stats.preprocess_us = (stamps["preprocessed"] - stamps["traversed"]) // 1000
    stats.processing_us = (done - stamps["preprocessed"]) // 1000
    log.debug("query %d: %s", query.id, stats)
    return bsf, stats


def collect_samples(
    queries: Iterable[Query],
    tree: IndexTree,
    batches: list[RsBatch],
    mode: SearchMode = SearchMode(),
    costs: SimCosts = SimCosts(),
) -> list[CalibrationSample]:
    """Warm-up runs with unbounded TH, measured in work units."""
    ret = []
    for query in queries:
        _, stats = answer_query(query, tree, batches, 1, Threshold(), mode)
        work = Work(stats.lower_bounds, stats.real_distances, stats.warps)
        exec_time = max(costs.units(work, mode.dtw_window), 1e-9)
        if math.isfinite(stats.initial_bsf):
            ret.append(
                CalibrationSample(
                    stats.initial_bsf, exec_time, stats.median_queue_size
                )
            )
    return ret


# Unit tests


def _setup(
    count: int = 2000,
    length: int = 64,
    w: int = 8,
    capacity: int = 16,
    seed: int = 0,
    n_sb: int = 4,
) -> tuple[IndexTree, list[RsBatch], Collection]:
    rng = np.random.default_rng(seed)
    data = z_normalize_all(rng.normal(size=(count, length)).cumsum(axis=1))
    tree, _ = build_index(data, np.arange(count, dtype=np.int64), w, capacity)
    return tree, partition_rs_batches(tree, n_sb), data


def _queries(count: int, length: int, seed: int) -> Collection:
    rng = np.random.default_rng(seed)
    return z_normalize_all(rng.normal(size=(count, length)).cumsum(axis=1))


def _oracle(data: Collection, q: Series, k: int = 1) -> list[float]:
    return sorted(np.sqrt(((data - q) ** 2).sum(axis=1)).tolist())[:k]


def test_approx_search_duplicate_hit():
    tree, _, data = _setup()
    q = Query.prepare(0, data[123], tree.w)
    bsf, _ = approx_search(q, tree)
    assert bsf.value == 0 and bsf.series_id == 123


def test_approx_search_single_leaf_is_exact():
    tree, _, data = _setup(count=300, capacity=5000)
    for q in _queries(5, 64, 1):
        bsf, _ = approx_search(Query.prepare(0, q, tree.w), tree)
        assert math.isclose(bsf.value, _oracle(data, q)[0])


def test_approx_search_scans_one_leaf():
    tree, _, data = _setup(count=10_000, capacity=50)
    for i, q in enumerate(_queries(20, 64, 2)):
        query = Query.prepare(i, q, tree.w)
        leaf, _ = approx_leaf(query, tree)
        bsf, _ = approx_search(query, tree)
        assert leaf.ids is not None and len(leaf.ids)
        assert bsf.value >= _oracle(data, q)[0] - 1e-12
        assert math.isclose(bsf.value, _oracle(data[leaf.ids], q)[0])


def test_answer_query_single_series():
    tree, batches, data = _setup(count=1)
    q = _queries(1, 64, 3)[0]
    bsf, stats = answer_query(Query.prepare(0, q, tree.w), tree, batches[:1])
    assert bsf.series_id == 0
    assert math.isclose(bsf.distance, _oracle(data, q)[0])


def test_answer_query_zero_override_prunes_everything():
    tree, batches, data = _setup()
    query = Query.prepare(0, data[7], tree.w)
    bsf, stats = answer_query(query, tree, batches, initial_bsf_override=0)
    assert bsf.distance == 0 and stats.visited_leaves == 0
    query = Query.prepare(1, _queries(1, 64, 4)[0], tree.w)
    bsf, stats = answer_query(query, tree, batches, initial_bsf_override=0)
    assert bsf.distance > 0 and stats.visited_leaves == 0


def test_answer_query_matches_brute_force():
    tree, batches, data = _setup(count=5000)
    for i, q in enumerate(_queries(40, 64, 5)):
        query = Query.prepare(i, q, tree.w)
        bsf, _ = answer_query(query, tree, batches, n_threads=4)
        assert math.isclose(bsf.distance, _oracle(data, q)[0], rel_tol=1e-9)
        assert all(b <= a for a, b in zip(bsf.history, bsf.history[1:]))


def test_thread_count_th_and_help_independence():
    tree, batches, data = _setup(count=3000, n_sb=8)
    for i, q in enumerate(_queries(10, 64, 6)):
        query = Query.prepare(i, q, tree.w)
        expect = _oracle(data, q)[0]
        for n_threads in [1, 2, 4, 8]:
            for th, help_th in [(1, 0), (3, 2), (UNBOUNDED, 8)]:
                bsf, _ = answer_query(
                    query,
                    tree,
                    batches,
                    n_threads,
                    Threshold(fixed=th),
                    help_th=help_th,
                )
                assert math.isclose(bsf.distance, expect, rel_tol=1e-9)


def test_knn_matches_brute_force():
    tree, batches, data = _setup(count=3000)
    for k in [1, 5, 10, 20]:
        for i, q in enumerate(_queries(5, 64, 7)):
            query = Query.prepare(i, q, tree.w)
            bsf, _ = answer_query(
                query, tree, batches, 2, mode=SearchMode(k=k)
            )
            got = [d for d, _ in bsf.neighbors()]
            assert np.allclose(got, _oracle(data, q, k))
            assert len({sid for _, sid in bsf.neighbors()}) == k


def test_dtw_matches_dp_oracle():
    tree, batches, data = _setup(count=300, length=32, w=4, capacity=8)
    for r in [0, 2, 5]:
        mode = SearchMode(dtw_window=r)
        for i, q in enumerate(_queries(3, 32, 8)):
            query = Query.prepare(i, q, tree.w, mode)
            bsf, _ = answer_query(query, tree, batches, 2, mode=mode)
            expect = min(dtw_distance(q, s, r) for s in data)
            assert math.isclose(bsf.distance, expect, rel_tol=1e-9)
            if r == 0:
                euclid, _ = answer_query(
                    Query.prepare(i, q, tree.w), tree, batches
                )
                assert bsf.distance == euclid.distance


def _traverse_all(search: QuerySearch) -> None:
    for batch in search.batches:
        search.process_rs_batch(batch)


def test_process_rs_batch_no_pruning():
    tree, batches, _ = _setup()
    query = Query.prepare(0, _queries(1, 64, 9)[0], tree.w)
    search = QuerySearch(query, tree, batches, Bsf(), UNBOUNDED)
    _traverse_all(search)
    enqueued = sum(len(q) for b in search.batches for q in b.queues)
    assert enqueued == sum(1 for leaf in tree.leaves if leaf.size)


def test_process_rs_batch_th_one():
    tree, batches, _ = _setup()
    query = Query.prepare(0, _queries(1, 64, 10)[0], tree.w)
    bsf = Bsf(limit=3.0)
    search = QuerySearch(query, tree, batches, bsf, 1)
    _traverse_all(search)
    queues = [q for b in search.batches for q in b.queues]
    assert all(len(q) == 1 and q.sealed for q in queues)
    leaf_lbs = {
        leaf.leaf_id: region_lower_bounds(
            query.upper, query.lower, leaf.lo, leaf.hi, tree.segment_width
        )[0]
        for leaf in tree.leaves
        if leaf.size
    }
    expect = {i for i, lb in leaf_lbs.items() if lb < 3.0}
    assert {q.entries[0][1] for q in queues} == expect


def test_queue_discipline():
    tree, batches, _ = _setup(count=4000)
    query = Query.prepare(0, _queries(1, 64, 11)[0], tree.w)
    search = QuerySearch(query, tree, batches, Bsf(), 5)
    _traverse_all(search)
    for batch in search.batches:
        assert all(len(q) == 5 for q in batch.queues if q.sealed)
        assert sum(not q.sealed for q in batch.queues) <= 1
        owned = {
            leaf.leaf_id
            for key in batch.root_keys
            for leaf in tree.roots[key].leaves()
        }
        for q in batch.queues:
            assert {leaf_id for _, leaf_id, _ in q.entries} <= owned
            assert q.owner_batch == batch.id


def test_preprocess_queues():
    assert preprocess_queues([]) == []
    tree, batches, _ = _setup(count=50)
    leaf = tree.leaves[0]
    fake = [b.fresh() for b in batches[:3]]
    for batch, top in zip(fake, [5.0, 1.0, 3.0]):
        q = LeafQueue(batch.id, 4)
        q.push(top, leaf)
        batch.queues.append(q)
    assert [q.top for q in preprocess_queues(fake)] == [1.0, 3.0, 5.0]

    tree, batches, _ = _setup()
    query = Query.prepare(0, _queries(1, 64, 12)[0], tree.w)
    search = QuerySearch(query, tree, batches, Bsf(), 3)
    _traverse_all(search)
    search.preprocess()
    tops = [q.top for q in search.pqueues]
    assert tops == sorted(tops)
    assert search.tot_pq == sum(len(b.queues) for b in search.batches)


def test_process_queue_cutoff_and_minimum():
    tree, batches, data = _setup()
    q = _queries(1, 64, 13)[0]
    query = Query.prepare(0, q, tree.w)
    search = QuerySearch(query, tree, batches, Bsf(limit=0.0), UNBOUNDED)
    queue = LeafQueue(0, UNBOUNDED)
    queue.push(0.5, tree.leaves[0])
    assert search.process_queue(queue) == Work()

    search = QuerySearch(query, tree, batches, Bsf(), UNBOUNDED)
    queue = LeafQueue(0, UNBOUNDED)
    members = [leaf for leaf in tree.leaves if leaf.size][:10]
    for leaf in members:
        queue.push(0.0, leaf)
    search.process_queue(queue)
    rows = np.concatenate([lf.ids for lf in members if lf.ids is not None])
    assert math.isclose(search.bsf.value, _oracle(data[rows], q)[0])


def test_early_cutoff_does_not_change_answers():
    tree, batches, data = _setup(count=3000)
    for i, q in enumerate(_queries(10, 64, 14)):
        query = Query.prepare(i, q, tree.w)
        with_cutoff, a = answer_query(query, tree, batches, 2)
        without, b = answer_query(query, tree, batches, 2, cutoff=False)
        assert with_cutoff.distance == without.distance
        assert a.visited_leaves <= b.visited_leaves


def test_shared_bound_prunes_more():
    tree, batches, data = _setup(count=4000)
    for i, q in enumerate(_queries(10, 64, 15)):
        query = Query.prepare(i, q, tree.w)
        exact = _oracle(data, q)[0]
        _, plain = answer_query(query, tree, batches)
        bsf, shared = answer_query(
            query, tree, batches, initial_bsf_override=exact
        )
        assert shared.pruned_leaves >= plain.pruned_leaves
        assert bsf.value == exact


def test_give_away_take_away_property():
    tree, batches, _ = _setup(count=4000, n_sb=8)
    query = Query.prepare(0, _queries(1, 64, 16)[0], tree.w)
    search = QuerySearch(query, tree, batches, Bsf(), 2)
    assert search.give_away(4) == []  # not in the processing phase yet
    _traverse_all(search)
    search.preprocess()
    first: dict[int, int] = {}
    for q in search.pqueues:
        first.setdefault(q.owner_batch, q.position)
    claimed = search.next_queue()
    assert claimed is not None
    eligible = sorted(
        (b for b, pos in first.items() if pos >= 1), key=lambda b: -first[b]
    )
    granted = search.give_away(4)
    assert granted == eligible[:4]
    assert claimed.owner_batch not in granted
    while (queue := search.next_queue()) is not None:
        assert queue.owner_batch not in granted
    assert search.give_away(100) == []  # everything claimed or stolen


def test_threshold_for_query():
    flat = SigmoidParams(m=640, M=640, b=1, c=1, d=0)
    for z in [-5.0, 0.0, 10.0]:
        assert threshold_for_query(z, flat, 16) == 40
        assert threshold_for_query(z, flat, 64) == TH_FLOOR
    rising = SigmoidParams(m=1000, M=5000, b=1, c=2, d=3)
    assert math.isclose(rising(-1e6), 1000)
    assert threshold_for_query(-1e6, rising, 1) == 1000
    assert Threshold(rising, divisor=1).for_query(3.0) == 3000
    assert Threshold().for_query(3.0) == UNBOUNDED
    assert Threshold(fixed=7).for_query(3.0) == 7


def test_collected_samples_predict_held_out_cost():
    tree, batches, data = _setup(count=4000, capacity=16)
    rng = np.random.default_rng(17)
    noise = np.geomspace(0.01, 2.0, 60)
    picks = rng.permutation(len(data))[:60]
    queries = [
        Query.prepare(i, data[j] + rng.normal(0, s, data.shape[1]), tree.w)
        for i, (j, s) in enumerate(zip(picks, rng.permutation(noise)))
    ]
    samples = collect_samples(queries, tree, batches)
    assert len(samples) == 60
    model = fit_linear(samples[:40])
    held_out = samples[40:]
    rho = spearmanr(
        [predict_time(model, s.initial_bsf) for s in held_out],
        [s.exec_time for s in held_out],
    )[0]
    assert rho > 0.5
