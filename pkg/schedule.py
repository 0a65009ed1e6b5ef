"""Assigning a query batch to the nodes of one replication group."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from heapq import heapify, heappop, heappush
from itertools import product
import logging
from threading import Lock, Thread
from typing import Sequence

from lcg import Lcg64

log = logging.getLogger(__name__)


class Policy(Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"
    PREDICT_ST_UNSORTED = "predict-st-unsorted"
    PREDICT_ST = "predict-st"
    PREDICT_DN = "predict-dn"

    @property
    def dynamic(self) -> bool:
        return self in {Policy.DYNAMIC, Policy.PREDICT_DN}

    @property
    def predictive(self) -> bool:
        return self.value.startswith("predict")


@dataclass
class Schedule:
    """Per-node query lists (static policies) or one dispatch order."""

    policy: Policy
    per_node: list[list[int]] = field(default_factory=list)
    dispatch: list[int] = field(default_factory=list)

    def query_ids(self) -> list[int]:
        if self.policy.dynamic:
            return list(self.dispatch)
        return [q for node in self.per_node for q in node]


def schedule_static(query_ids: Sequence[int], n_nodes: int) -> Schedule:
    """Contiguous runs in input order, the longer runs first."""
    assert n_nodes >= 1
    size, extra = divmod(len(query_ids), n_nodes)
    per_node: list[list[int]] = []
    start = 0
    for i in range(n_nodes):
        stop = start + size + (1 if i < extra else 0)
        per_node.append(list(query_ids[start:stop]))
        start = stop
    return Schedule(Policy.STATIC, per_node=per_node)


def schedule_predict_static(
    query_ids: Sequence[int],
    estimates: Sequence[float],
    sorted_: bool,
    n_nodes: int,
) -> Schedule:
    """Greedy: each query goes to the currently least loaded node.

    With sorted_ the queries are taken by descending estimate (LPT).
    """
    assert n_nodes >= 1 and len(query_ids) == len(estimates)
    order = list(zip(query_ids, estimates))
    if sorted_:
        order.sort(key=lambda qe: (-qe[1], qe[0]))
    loads = [(0.0, node) for node in range(n_nodes)]
    heapify(loads)
    per_node: list[list[int]] = [[] for _ in range(n_nodes)]
    for q, estimate in order:
        load, node = heappop(loads)
        per_node[node].append(q)
        heappush(loads, (load + estimate, node))
    policy = Policy.PREDICT_ST if sorted_ else Policy.PREDICT_ST_UNSORTED
    return Schedule(policy, per_node=per_node)


def schedule_predict_dynamic(
    query_ids: Sequence[int], estimates: Sequence[float]
) -> Schedule:
    assert len(query_ids) == len(estimates)
    order = sorted(range(len(query_ids)), key=lambda i: -estimates[i])
    return Schedule(Policy.PREDICT_DN, dispatch=[query_ids[i] for i in order])


def make_schedule(
    policy: Policy,
    query_ids: Sequence[int],
    n_nodes: int,
    estimates: Sequence[float] | None = None,
) -> Schedule:
    if policy.predictive and estimates is None:
        raise ValueError(f"{policy.value} needs execution time estimates")
    if policy is Policy.STATIC:
        return schedule_static(query_ids, n_nodes)
    if policy is Policy.DYNAMIC:
        return Schedule(policy, dispatch=list(query_ids))
    assert estimates is not None
    if policy is Policy.PREDICT_DN:
        return schedule_predict_dynamic(query_ids, estimates)
    return schedule_predict_static(
        query_ids, estimates, policy is Policy.PREDICT_ST, n_nodes
    )


class DispatchQueue:
    """The coordinator's pull queue for the dynamic policies."""

    def __init__(self, order: Sequence[int]):
        self.pending = deque(order)
        self.handed_out: list[tuple[int, int]] = []  # (node, query)
        self._lock = Lock()

    def __len__(self) -> int:
        return len(self.pending)

    def dispatch_next(self, node: int) -> int | None:
        with self._lock:
            if not self.pending:
                return None
            q = self.pending.popleft()
            self.handed_out.append((node, q))
        log.debug("dispatch q%d to node %d", q, node)
        return q


# Unit tests

ES = [100.0, 50.0, 200.0, 250.0, 80.0]
Q = [1, 2, 3, 4, 5]


def test_schedule_static():
    assert schedule_static(Q[:4], 2).per_node == [[1, 2], [3, 4]]
    assert schedule_static(Q, 2).per_node == [[1, 2, 3], [4, 5]]
    sizes = [len(n) for n in schedule_static(list(range(101)), 8).per_node]
    assert sizes == [13] * 5 + [12] * 3
    assert schedule_static([], 3).per_node == [[], [], []]


def test_schedule_predict_static_worked_examples():
    unsorted = schedule_predict_static(Q, ES, False, 2)
    assert unsorted.per_node == [[1, 4], [2, 3, 5]]
    sorted_ = schedule_predict_static(Q, ES, True, 2)
    assert sorted_.per_node == [[4, 5], [3, 1, 2]]
    equal = schedule_predict_static(list(range(6)), [1.0] * 6, False, 3)
    assert equal.per_node == [[0, 3], [1, 4], [2, 5]]


def test_schedule_predict_dynamic():
    assert schedule_predict_dynamic(Q, ES).dispatch == [4, 3, 1, 5, 2]
    assert schedule_predict_dynamic([9], [3.0]).dispatch == [9]
    assert schedule_predict_dynamic(Q, [1.0] * 5).dispatch == Q


def test_every_query_scheduled_once():
    ids = list(range(37))
    estimates = [float((i * 7919) % 13) for i in ids]
    for policy in Policy:
        schedule = make_schedule(policy, ids, 4, estimates)
        assert sorted(schedule.query_ids()) == ids


def _loads(schedule: Schedule, est: dict[int, float]) -> list[float]:
    return [sum(est[q] for q in node) for node in schedule.per_node]


def test_greedy_load_spread_bound():
    rng = Lcg64(174)
    for _ in range(1000):
        n_nodes = 1 << rng.below(5)
        estimates = [
            rng.uniform() * 10 ** rng.below(4) for _ in range(rng.below(60))
        ]
        est = dict(enumerate(estimates))
        for sorted_ in [False, True]:
            loads = _loads(
                schedule_predict_static(list(est), estimates, sorted_, n_nodes),
                est,
            )
            spread = max(loads) - min(loads)
            assert spread <= max(estimates, default=0.0) + 1e-9


def test_sorted_greedy_is_within_lpt_bound():
    n_nodes = 3
    for seed in range(10):
        estimates = [float((seed * 13 + i * 29) % 17 + 1) for i in range(7)]
        est = dict(enumerate(estimates))
        greedy = max(
            _loads(schedule_predict_static(list(est), estimates, True, 3), est)
        )
        optimal = min(
            max(
                sum(e for e, node in zip(estimates, assignment) if node == n)
                for n in range(n_nodes)
            )
            for assignment in product(range(n_nodes), repeat=len(estimates))
        )
        assert greedy <= (4 / 3 - 1 / (3 * n_nodes)) * optimal + 1e-9
        assert greedy >= optimal


def test_dispatch_queue():
    assert DispatchQueue([]).dispatch_next(0) is None
    queue = DispatchQueue([4, 3, 1])
    assert [queue.dispatch_next(n) for n in [0, 1, 0, 1]] == [4, 3, 1, None]


def test_dispatch_queue_racing_nodes():
    for _ in range(50):
        queue = DispatchQueue([7])
        got: list[int | None] = []
        threads = [
            Thread(target=lambda n=n: got.append(queue.dispatch_next(n)))
            for n in range(8)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(got, key=lambda q: q is None) == [7] + [None] * 7
        assert len(queue.handed_out) == 1
