"""The five-stage distributed execution, as a discrete-event simulation.

Nodes exchange typed messages through a Transport. The reference
SimTransport delivers them in virtual time after a fixed latency, so a
whole cluster runs deterministically on one thread:

  1. node 0 assigns every node its chunk and hands each replication
     group coordinator the query batch,
  2. every node summarises its chunk and builds its index,
  3. group coordinators estimate, sort and schedule the queries,
  4. nodes answer queries, share BSF improvements, and steal work from
     busy peers of their replication group once their own share is done,
  5. node 0 merges the local answers and shuts the cluster down.

Each node runs n_threads virtual workers that drive the same QuerySearch
steps as the threaded engine; a step occupies its worker for the step's
cost in virtual time (see SimCosts).
"""
from __future__ import annotations

from collections import Counter, deque
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from functools import partial
import json
import logging
import math
from typing import Callable, Protocol

import numpy as np
import simulus

from index import (
    LEAF_CAPACITY,
    BuildTimes,
    IndexTree,
    RsBatch,
    build_index,
    partition_rs_batches,
)
from lcg import Lcg64, stream_seed
from partition import (
    BALANCE_TOLERANCE,
    LAMBDA,
    ClusterTopology,
    InvalidConfig,
    Method,
    PartitionPlan,
    is_power_of_two,
    make_topology,
    plan_partition,
)
from predict import LinearModel, Models, SigmoidParams, predict_time
from schedule import DispatchQueue, Policy, make_schedule
from search import (
    HELP_TH,
    Bsf,
    Cursor,
    LeafQueue,
    Phase,
    Query,
    QuerySearch,
    QueryStats,
    SearchMode,
    SimCosts,
    Threshold,
    Work,
    approx_search,
)
from series import (
    DEFAULT_SEGMENTS,
    Collection,
    InvalidInput,
    z_normalize_all,
)

N_SEND = 4
MAX_EVENTS = 50_000_000

log = logging.getLogger(__name__)

Neighbors = list[tuple[float, int]]
TraceEntry = tuple[float, int, int, str]


@dataclass(frozen=True)
class ClusterConfig:
    n_nodes: int = 1
    k: int = 1  # replication groups; n_nodes // k copies of the data
    policy: Policy = Policy.STATIC
    partition: Method = Method.EQUALLY_SPLIT
    seed: int = 0
    lam: int = LAMBDA
    balance_tolerance: float = BALANCE_TOLERANCE
    w: int = DEFAULT_SEGMENTS
    leaf_capacity: int = LEAF_CAPACITY
    n_threads: int = 4
    n_sb: int = 16
    help_th: int = HELP_TH
    mode: SearchMode = SearchMode()
    threshold: Threshold = Threshold()
    share_bsf: bool = True
    work_stealing: bool = True
    n_send: int = N_SEND
    costs: SimCosts = SimCosts()
    build_workers: int = 1

    def problems(self) -> list[str]:
        ret = []
        if not is_power_of_two(self.n_nodes):
            ret.append(f"node count {self.n_nodes} is not a power of two")
        if not is_power_of_two(self.k) or self.k > self.n_nodes:
            ret.append(
                f"replication groups {self.k} must be a power of two"
                f" no larger than {self.n_nodes}"
            )
        for name in ["w", "leaf_capacity", "n_threads", "n_sb", "n_send"]:
            if getattr(self, name) < 1:
                ret.append(f"{name} must be positive")
        if self.help_th < 0 or self.lam < 0:
            ret.append("help_th and lam must not be negative")
        if self.costs.latency < 0 or self.costs.steal_backoff <= 0:
            ret.append("latency must be >= 0 and steal backoff > 0")
        return ret

    def validate(self) -> None:
        if problems := self.problems():
            raise InvalidConfig("; ".join(problems))


class Kind(Enum):
    ASSIGN_CHUNK = "assign-chunk"
    QUERY_BATCH = "query-batch"
    REQUEST_QUERY = "request-query"
    ASSIGN_QUERY = "assign-query"
    BSF_SHARE = "bsf-share"
    DONE = "done"
    STEAL_REQUEST = "steal-request"
    STEAL_GRANT = "steal-grant"
    LOCAL_ANSWER = "local-answer"
    SHUTDOWN = "shutdown"


@dataclass(frozen=True)
class ChunkAssignment:
    chunk: int


@dataclass(frozen=True)
class QueryBatch:
    queries: tuple[int, ...]
    whole: bool  # the group's full batch, to be scheduled


@dataclass(frozen=True)
class QueryAssignment:
    query: int | None


@dataclass(frozen=True)
class BsfShare:
    query: int
    value: float


@dataclass(frozen=True)
class StealGrant:
    batches: tuple[int, ...]
    query: int
    bsf: float


@dataclass(frozen=True)
class LocalAnswer:
    answers: dict[int, Neighbors]


Payload = (
    ChunkAssignment
    | QueryBatch
    | QueryAssignment
    | BsfShare
    | StealGrant
    | LocalAnswer
    | None
)


@dataclass(frozen=True)
class Message:
    kind: Kind
    sender: int
    receiver: int
    payload: Payload = None


class Transport(Protocol):
    def send(self, message: Message, at: float) -> None:
        ...


class SimTransport:
    """Reliable per-pair FIFO delivery after a fixed virtual latency."""

    def __init__(self, sim: Simulation, latency: float):
        self.sim = sim
        self.latency = latency
        self.trace: list[TraceEntry] = []
        self.counts: Counter[str] = Counter()
        self._last: dict[tuple[int, int], float] = {}

    def send(self, message: Message, at: float) -> None:
        pair = (message.sender, message.receiver)
        deliver = max(at + self.latency, self._last.get(pair, 0.0))
        self._last[pair] = deliver
        self.trace.append(
            (at, message.sender, message.receiver, message.kind.value)
        )
        self.counts[message.kind.value] += 1
        self.sim.schedule(deliver, partial(self.sim.deliver, message))


class BookKeeping:
    """Best BSF heard per query; entries only ever decrease."""

    def __init__(self, n_queries: int):
        self.best_known = np.full(n_queries, math.inf)

    def fold(self, query: int, value: float) -> bool:
        if value < self.best_known[query]:
            self.best_known[query] = value
            return True
        return False

    def override(self, query: int) -> float:
        return float(self.best_known[query])


def merge_neighbors(k: int, *lists: Neighbors) -> Neighbors:
    """Best k (distance, id) pairs, one per series id."""
    best: dict[int, float] = {}
    for dist, sid in (pair for lst in lists for pair in lst):
        if dist < best.get(sid, math.inf):
            best[sid] = dist
    return sorted((d, sid) for sid, d in best.items())[:k]


@dataclass(frozen=True)
class ChunkIndex:
    tree: IndexTree
    batches: list[RsBatch]
    wall: BuildTimes


@dataclass
class NodeTimes:
    """Per-node stage times in virtual units (build_wall_s is real)."""

    node: int
    group: int = 0
    cluster: int = 0
    buffer: float = 0.0
    tree: float = 0.0
    answering: float = 0.0
    total: float = 0.0
    build_wall_s: float = 0.0
    queries: int = 0
    stolen_jobs: int = 0

    @property
    def index(self) -> float:
        return self.buffer + self.tree


@dataclass
class RunMetrics:
    nodes: list[NodeTimes]
    makespan: float
    messages: dict[str, int]
    steal_requests: int = 0
    steal_grants: int = 0
    empty_grants: int = 0
    stolen_batches: int = 0
    max_outstanding_steals: int = 0
    post_shutdown_messages: int = 0
    duplicate_leaf_evaluations: int = 0
    stored_series: int = 0
    query_stats: list[QueryStats] = field(default_factory=list)
    trace: list[TraceEntry] = field(default_factory=list)

    def cluster_max(self) -> dict[str, float]:
        """Cluster-level stage times: the slowest node of each stage."""
        return {
            stage: max((getattr(n, stage) for n in self.nodes), default=0.0)
            for stage in ["buffer", "tree", "index", "answering", "total"]
        }

    @property
    def pruned_leaves(self) -> int:
        return sum(s.pruned_leaves for s in self.query_stats)

    def to_json(self, with_trace: bool = False) -> str:
        raw = asdict(self)
        for node, times in zip(raw["nodes"], self.nodes):
            node["index"] = times.index
        raw["cluster_max"] = self.cluster_max()
        if not with_trace:
            del raw["trace"]
        return json.dumps(raw)


class Job:
    """One query search (own or stolen) on a node's virtual workers."""

    def __init__(
        self,
        node: SimNode,
        query: int,
        search: QuerySearch,
        initial_bsf: float,
        stolen: bool,
    ):
        self.node = node
        self.query = query
        self.search = search
        self.initial_bsf = initial_bsf
        self.stolen = stolen
        self.workers = node.sim.config.n_threads
        self.cursors = [Cursor() for _ in range(self.workers)]
        self.current: list[LeafQueue | None] = [None] * self.workers
        self.arrived = 0
        self.finished = 0
        self.improved = False
        search.on_improve = self._improved

    def _improved(self, value: float) -> None:
        self.improved = True

    def _cost(self, work: Work) -> float:
        return self.node.sim.config.costs.units(
            work, self.search.mode.dtw_window
        )

    def start(self, at: float) -> None:
        for w in range(self.workers):
            self.node.sim.schedule(at, partial(self.step, w))

    def step(self, w: int, at: float) -> None:
        sim, search = self.node.sim, self.search
        if search.phase is Phase.TRAVERSAL:
            claim = search.claim_root(self.cursors[w])
            if claim is None:
                self.arrived += 1
                if self.arrived == self.workers:
                    self._preprocess(at)
                return
            work = search.traverse_root(*claim)
            sim.schedule(at + self._cost(work), partial(self.step, w))
            return
        while True:
            queue = self.current[w]
            if queue is None:
                queue = self.current[w] = search.next_queue()
            if queue is None:
                self.finished += 1
                if self.finished == self.workers:
                    self.node.job_done(self, at)
                return
            work_or_none = search.process_leaf(queue)
            if work_or_none is None:
                self.current[w] = None
                continue
            done_at = at + self._cost(work_or_none)
            if self.improved:
                self.improved = False
                value = search.bsf.value
                sim.schedule(
                    done_at, partial(self.node.share_bsf, self.query, value)
                )
            sim.schedule(done_at, partial(self.step, w))
            return

    def _preprocess(self, at: float) -> None:
        self.search.preprocess()
        costs = self.node.sim.config.costs
        done_at = at + costs.preprocess_per_queue * self.search.tot_pq
        self.start(done_at)


class SimNode:
    def __init__(self, sim: Simulation, node_id: int):
        self.sim = sim
        self.id = node_id
        topology = sim.topology
        self.peers = topology.peers(node_id)
        self.group = topology.group_of(node_id)
        self.group_coordinator = topology.coordinator_of(node_id)
        self.transport: Transport = sim.transport
        self.book = BookKeeping(len(sim.queries))
        self.done_nodes: set[int] = set()
        self.response_flag = False
        self.outstanding = 0
        self.rng = Lcg64(stream_seed(sim.config.seed, node_id))
        self.chunk: ChunkIndex | None = None
        self.index_built = False
        self.own: deque[int] = deque()
        self.own_received = False
        self.group_batch: list[int] | None = None
        self.dispatch: DispatchQueue | None = None
        self.dispatch_open = False
        self.pending_requests: list[int] = []
        self.answers: dict[int, Neighbors] = {}
        self.evaluated: dict[int, list[int]] = {}
        self.stats: list[QueryStats] = []
        self.job: Job | None = None
        self.started = False
        self.done = False
        self.terminated = False
        self.shutdown = False
        self.ready_at = 0.0
        self.times = NodeTimes(
            node_id, self.group, topology.cluster_of(node_id)
        )
        self.local_answers: dict[int, LocalAnswer] = {}

    def __repr__(self) -> str:
        return (
            f"SimNode({self.id}, done={self.done}, "
            f"terminated={self.terminated}, job={self.job is not None})"
        )

    @property
    def config(self) -> ClusterConfig:
        return self.sim.config

    @property
    def is_group_coordinator(self) -> bool:
        return self.id == self.group_coordinator

    def send(
        self, kind: Kind, receiver: int, at: float, payload: Payload = None
    ) -> None:
        self.transport.send(Message(kind, self.id, receiver, payload), at)

    def receive(self, message: Message, at: float) -> None:
        if self.shutdown:
            self.sim.post_shutdown += 1
        p = message.payload
        match message.kind:
            case Kind.ASSIGN_CHUNK:
                assert isinstance(p, ChunkAssignment)
                self.build(p.chunk, at)
            case Kind.QUERY_BATCH:
                assert isinstance(p, QueryBatch)
                if p.whole:
                    self.group_batch = list(p.queries)
                    self.schedule_batch(at)
                else:
                    self.own.extend(p.queries)
                    self.own_received = True
                    self.maybe_start(at)
            case Kind.REQUEST_QUERY:
                self.pending_requests.append(message.sender)
                self.serve_requests(at)
            case Kind.ASSIGN_QUERY:
                assert isinstance(p, QueryAssignment)
                if p.query is None:
                    self.become_done(at)
                else:
                    self.start_query(p.query, at)
            case Kind.BSF_SHARE:
                assert isinstance(p, BsfShare)
                self.fold_share(p.query, p.value)
            case Kind.DONE:
                self.done_nodes.add(message.sender)
            case Kind.STEAL_REQUEST:
                self.handle_steal_request(message.sender, at)
            case Kind.STEAL_GRANT:
                assert isinstance(p, StealGrant)
                self.receive_grant(p, at)
            case Kind.LOCAL_ANSWER:
                assert isinstance(p, LocalAnswer)
                self.collect_answer(message.sender, p, at)
            case Kind.SHUTDOWN:
                self.shutdown = True

    # Stage 1: distribution, run by node 0

    def distribute(self, at: float) -> None:
        topology = self.sim.topology
        for j in range(topology.n_nodes):
            chunk = ChunkAssignment(topology.group_of(j))
            self.send(Kind.ASSIGN_CHUNK, j, at, chunk)
        batch = QueryBatch(tuple(range(len(self.sim.queries))), whole=True)
        for coordinator in topology.group_coordinators:
            self.send(Kind.QUERY_BATCH, coordinator, at, batch)

    # Stage 2: index construction

    def build(self, chunk: int, at: float) -> None:
        self.chunk = self.sim.index_for(chunk)
        size = len(self.chunk.tree.ids)
        costs, threads = self.config.costs, self.config.n_threads
        self.times.buffer = costs.summarize * size / threads
        self.times.tree = costs.insert * size / threads
        wall = self.chunk.wall
        self.times.build_wall_s = wall.buffer_s + wall.tree_s
        self.sim.schedule(at + self.times.index, self.index_ready)

    def index_ready(self, at: float) -> None:
        self.ready_at = at
        self.index_built = True
        log.debug("node %d: index ready at %.1f", self.id, at)
        if self.is_group_coordinator:
            self.schedule_batch(at)
        elif self.config.policy.dynamic:
            self.send(Kind.REQUEST_QUERY, self.group_coordinator, at)
        else:
            self.maybe_start(at)

    # Stage 3: scheduling, run by each group coordinator

    def schedule_batch(self, at: float) -> None:
        if not self.index_built or self.group_batch is None:
            return
        assert self.chunk is not None
        config, batch = self.config, self.group_batch
        members = self.sim.topology.groups[self.group]
        estimates = None
        cost = 0.0
        if config.policy.predictive:
            linear = self.sim.linear
            estimates = []
            for q in batch:
                bsf, work = approx_search(
                    self.sim.queries[q], self.chunk.tree, config.mode
                )
                estimates.append(predict_time(linear, bsf.value))
                cost += config.costs.units(work, config.mode.dtw_window)
            cost /= config.n_threads
        schedule = make_schedule(config.policy, batch, len(members), estimates)
        order = schedule.query_ids()
        assert sorted(order) == sorted(batch)
        log.debug("group %d: %s %s", self.group, config.policy.value, order)
        ready = at + cost
        if config.policy.dynamic:
            self.dispatch = DispatchQueue(schedule.dispatch)
            self.sim.schedule(ready, self.open_dispatch)
            return
        for member, queries in zip(members, schedule.per_node):
            batch_of = QueryBatch(tuple(queries), whole=False)
            self.send(Kind.QUERY_BATCH, member, ready, batch_of)

    def open_dispatch(self, at: float) -> None:
        self.dispatch_open = True
        self.serve_requests(at)
        self.next_query(at)

    def serve_requests(self, at: float) -> None:
        if not self.dispatch_open:
            return
        assert self.dispatch is not None
        for requester in self.pending_requests:
            q = self.dispatch.dispatch_next(requester)
            self.send(Kind.ASSIGN_QUERY, requester, at, QueryAssignment(q))
        self.pending_requests.clear()

    # Stage 4: query answering

    def maybe_start(self, at: float) -> None:
        if self.index_built and self.own_received and not self.started:
            self.started = True
            self.next_query(at)

    def next_query(self, at: float) -> None:
        if not self.config.policy.dynamic:
            if self.own:
                self.start_query(self.own.popleft(), at)
            else:
                self.become_done(at)
        elif self.is_group_coordinator:
            assert self.dispatch is not None
            q = self.dispatch.dispatch_next(self.id)
            if q is None:
                self.become_done(at)
            else:
                self.start_query(q, at)
        else:
            self.send(Kind.REQUEST_QUERY, self.group_coordinator, at)

    def apply_bookkeeping(self, query: int) -> float:
        """Initial BSF override for a query about to be answered."""
        if not self.config.share_bsf:
            return math.inf
        return self.book.override(query)

    def start_query(self, q: int, at: float) -> None:
        assert self.chunk is not None and self.job is None
        config = self.config
        query = self.sim.queries[q]
        bsf, work = approx_search(query, self.chunk.tree, config.mode)
        initial_bsf = bsf.value
        at += config.costs.units(work, config.mode.dtw_window)
        if math.isfinite(initial_bsf):
            self.share_bsf(q, initial_bsf, at)
        bsf.tighten(self.apply_bookkeeping(q))
        search = QuerySearch(
            query,
            self.chunk.tree,
            self.chunk.batches,
            bsf,
            config.threshold.for_query(initial_bsf),
            config.mode,
            config.help_th,
        )
        self.job = Job(self, q, search, initial_bsf, stolen=False)
        self.job.start(at)

    def job_done(self, job: Job, at: float) -> None:
        assert job is self.job
        self.job = None
        q, search = job.query, job.search
        self.answers[q] = merge_neighbors(
            self.config.mode.k, self.answers.get(q, []), search.bsf.neighbors()
        )
        self.evaluated.setdefault(q, []).extend(search.evaluated)
        if job.stolen:
            self.times.stolen_jobs += 1
            self.perform_work_stealing(at)
            return
        self.stats.append(search.stats(job.initial_bsf))
        self.times.queries += 1
        self.next_query(at)

    def share_bsf(self, query: int, value: float, at: float) -> None:
        if not self.config.share_bsf:
            return
        self.book.fold(query, value)
        for j in range(self.sim.topology.n_nodes):
            if j != self.id:
                self.send(Kind.BSF_SHARE, j, at, BsfShare(query, value))

    def fold_share(self, query: int, value: float) -> None:
        if self.book.fold(query, value):
            if self.job is not None and self.job.query == query:
                self.job.search.bsf.tighten(value)

    def become_done(self, at: float) -> None:
        assert not self.done
        self.done = True
        self.times.answering = at - self.ready_at
        self.done_nodes.add(self.id)
        for peer in self.peers:
            self.send(Kind.DONE, peer, at)
        log.debug("node %d: done at %.1f", self.id, at)
        if self.config.work_stealing and self.peers:
            self.perform_work_stealing(at)
        else:
            self.terminate(at)

    # Work stealing

    def perform_work_stealing(self, at: float) -> None:
        """Ask a random busy peer for work, or terminate if none is left."""
        assert self.done and not self.response_flag
        candidates = [p for p in self.peers if p not in self.done_nodes]
        if not candidates:
            self.terminate(at)
            return
        target = self.rng.choice(candidates)
        self.response_flag = True
        self.outstanding += 1
        self.sim.max_outstanding = max(
            self.sim.max_outstanding, self.outstanding
        )
        self.sim.steal_requests += 1
        self.send(Kind.STEAL_REQUEST, target, at)

    def handle_steal_request(self, thief: int, at: float) -> None:
        job = self.job
        granted: list[int] = []
        if job is not None and not job.stolen:
            granted = job.search.give_away(self.config.n_send)
        if granted:
            assert job is not None
            grant = StealGrant(tuple(granted), job.query, job.search.bsf.value)
            self.sim.steal_grants += 1
            self.sim.stolen_batches += len(granted)
            log.debug(
                "node %d: %d batches of q%d to node %d",
                self.id,
                len(granted),
                job.query,
                thief,
            )
        else:
            grant = StealGrant((), -1, math.inf)
            self.sim.empty_grants += 1
        self.send(Kind.STEAL_GRANT, thief, at, grant)

    def receive_grant(self, grant: StealGrant, at: float) -> None:
        assert self.response_flag and self.chunk is not None
        self.response_flag = False
        self.outstanding -= 1
        if not grant.batches:
            self.sim.schedule(
                at + self.config.costs.steal_backoff,
                self.perform_work_stealing,
            )
            return
        config, q = self.config, grant.query
        bsf = Bsf(config.mode.k, min(grant.bsf, self.apply_bookkeeping(q)))
        search = QuerySearch(
            self.sim.queries[q],
            self.chunk.tree,
            [self.chunk.batches[b] for b in grant.batches],
            bsf,
            config.threshold.for_query(grant.bsf),
            config.mode,
            config.help_th,
        )
        self.job = Job(self, q, search, grant.bsf, stolen=True)
        self.job.start(at)

    # Stage 5: local answers and the merge at node 0

    def terminate(self, at: float) -> None:
        assert not self.terminated
        self.terminated = True
        self.times.total = at
        self.send(Kind.LOCAL_ANSWER, 0, at, LocalAnswer(dict(self.answers)))

    def collect_answer(
        self, sender: int, answer: LocalAnswer, at: float
    ) -> None:
        assert self.id == 0 and sender not in self.local_answers
        self.local_answers[sender] = answer
        if len(self.local_answers) < self.sim.topology.n_nodes:
            return
        k = self.config.mode.k
        self.sim.answers = [
            merge_neighbors(
                k, *(a.answers.get(q, []) for a in self.local_answers.values())
            )
            for q in range(len(self.sim.queries))
        ]
        self.sim.makespan = at
        log.info("all local answers merged at %.1f", at)
        for j in range(self.sim.topology.n_nodes):
            self.send(Kind.SHUTDOWN, j, at)


class Simulation:
    def __init__(
        self,
        config: ClusterConfig,
        data: Collection,
        queries: list[Query],
        plan: PartitionPlan,
        linear: LinearModel,
    ):
        self.config = config
        self.data = data
        self.queries = queries
        self.plan = plan
        self.linear = linear
        self.topology: ClusterTopology = make_topology(config.n_nodes, config.k)
        self.transport = SimTransport(self, config.costs.latency)
        self.engine = simulus.simulator()
        self.slots: dict[float, deque[Callable[[float], None]]] = {}
        self.fired = 0
        self.indexes: dict[int, ChunkIndex] = {}
        self.nodes = [SimNode(self, j) for j in range(config.n_nodes)]
        self.answers: list[Neighbors] | None = None
        self.makespan = 0.0
        self.steal_requests = 0
        self.steal_grants = 0
        self.empty_grants = 0
        self.stolen_batches = 0
        self.max_outstanding = 0
        self.post_shutdown = 0

    def schedule(self, at: float, action: Callable[[float], None]) -> None:
        """Run action at virtual time at, after anything already due then.

        Actions sharing an instant are one engine event, drained in the
        order they were scheduled.
        """
        if at not in self.slots:
            self.slots[at] = deque()
            self.engine.sched(self._fire, at, until=at)
        self.slots[at].append(action)

    def _fire(self, at: float) -> None:
        slot = self.slots[at]
        while slot:
            self.fired += 1
            if self.fired > MAX_EVENTS:
                raise RuntimeError(f"no quiescence after {MAX_EVENTS} events")
            slot.popleft()(at)
        del self.slots[at]

    def deliver(self, message: Message, at: float) -> None:
        self.nodes[message.receiver].receive(message, at)

    def index_for(self, chunk: int) -> ChunkIndex:
        """Nodes of a group hold the same chunk; build its index once."""
        if chunk not in self.indexes:
            ids = np.asarray(self.plan.chunks[chunk], dtype=np.int64)
            tree, wall = build_index(
                self.data[ids],
                ids,
                self.config.w,
                self.config.leaf_capacity,
                self.config.build_workers,
            )
            self.indexes[chunk] = ChunkIndex(
                tree, partition_rs_batches(tree, self.config.n_sb), wall
            )
        return self.indexes[chunk]

    def run(self) -> list[Neighbors]:
        self.nodes[0].distribute(0.0)
        self.engine.run()
        if self.answers is None:
            stuck = [n for n in self.nodes if not n.terminated]
            raise RuntimeError(f"run did not reach all-DONE: {stuck}")
        return self.answers

    def metrics(self) -> RunMetrics:
        duplicates = 0
        for group in self.topology.groups:
            for q in range(len(self.queries)):
                leaves = [
                    leaf
                    for j in group
                    for leaf in self.nodes[j].evaluated.get(q, [])
                ]
                duplicates += len(leaves) - len(set(leaves))
        return RunMetrics(
            nodes=[n.times for n in self.nodes],
            makespan=self.makespan,
            messages=dict(self.transport.counts),
            steal_requests=self.steal_requests,
            steal_grants=self.steal_grants,
            empty_grants=self.empty_grants,
            stolen_batches=self.stolen_batches,
            max_outstanding_steals=self.max_outstanding,
            post_shutdown_messages=self.post_shutdown,
            duplicate_leaf_evaluations=duplicates,
            stored_series=sum(
                len(chunk) for chunk in self.plan.node_chunks(self.topology)
            ),
            query_stats=[s for n in self.nodes for s in n.stats],
            trace=list(self.transport.trace),
        )


def run_cluster(
    config: ClusterConfig,
    data: Collection,
    queries: Collection,
    models: Models | None = None,
    plan: PartitionPlan | None = None,
) -> tuple[list[Neighbors], RunMetrics]:
    """Answer every query exactly on a simulated cluster."""
    config.validate()
    if data.ndim != 2 or queries.ndim != 2:
        raise InvalidInput("dataset and queries must be 2-D")
    if queries.shape[1] != data.shape[1]:
        raise InvalidInput(
            f"query length {queries.shape[1]} != series length {data.shape[1]}"
        )
    if len(data) < config.k:
        raise InvalidConfig(f"{len(data)} series cannot fill {config.k} chunks")
    if plan is None:
        plan = plan_partition(
            data,
            config.k,
            config.partition,
            config.w,
            config.seed,
            config.lam,
            config.balance_tolerance,
            config.build_workers,
        )
    plan.validate(len(data))
    if plan.n_chunks != config.k:
        raise InvalidConfig(f"plan has {plan.n_chunks} chunks, k={config.k}")
    linear = LinearModel.identity()
    if models is not None:
        linear = models.linear
        if config.threshold.sigmoid is None and config.threshold.fixed is None:
            threshold = Threshold(
                models.sigmoid,
                config.threshold.divisor,
                config.threshold.floor,
            )
            config = replace(config, threshold=threshold)
    prepared = [
        Query.prepare(i, q, config.w, config.mode)
        for i, q in enumerate(queries)
    ]
    sim = Simulation(config, data, prepared, plan, linear)
    log.info(
        "running %d queries on %d nodes, %d groups, %d data copies, %s",
        len(prepared),
        config.n_nodes,
        config.k,
        sim.topology.replication_degree,
        config.policy.value,
    )
    answers = sim.run()
    metrics = sim.metrics()
    log.info(
        "makespan %.1f, %d messages, %d steal grants",
        metrics.makespan,
        sum(metrics.messages.values()),
        metrics.steal_grants,
    )
    return answers, metrics


# Unit tests


def _walks(count: int, length: int, seed: int) -> Collection:
    rng = np.random.default_rng(seed)
    return z_normalize_all(rng.normal(size=(count, length)).cumsum(axis=1))


def _exact(
    data: Collection, queries: Collection, k: int = 1
) -> list[Neighbors]:
    ret = []
    for q in queries:
        dists = np.sqrt(((data - q) ** 2).sum(axis=1))
        order = np.argsort(dists, kind="stable")[:k]
        ret.append([(float(dists[i]), int(i)) for i in order])
    return ret


def _distances(answers: list[Neighbors]) -> list[list[float]]:
    return [[d for d, _ in a] for a in answers]


SMALL = ClusterConfig(w=8, leaf_capacity=16, n_threads=2, n_sb=4)


def test_bookkeeping_is_monotone():
    book = BookKeeping(3)
    assert book.override(2) == math.inf
    assert book.fold(2, 5.0) and not book.fold(2, 6.0)
    assert book.fold(2, 4.0) and book.override(2) == 4.0
    assert book.override(0) == math.inf


def test_merge_neighbors():
    a = [(1.0, 7), (3.0, 2)]
    b = [(1.0, 7), (2.0, 5), (0.5, 9)]
    assert merge_neighbors(3, a, b) == [(0.5, 9), (1.0, 7), (2.0, 5)]
    assert merge_neighbors(1) == []


def test_config_validation_lists_every_problem():
    bad = replace(SMALL, n_nodes=6, k=8, n_threads=0)
    try:
        bad.validate()
    except InvalidConfig as e:
        assert "power of two" in str(e) and "n_threads" in str(e)
    else:
        assert False, "accepted a bad config"


def test_single_node_matches_brute_force():
    data, queries = _walks(1500, 64, 0), _walks(10, 64, 1)
    answers, metrics = run_cluster(SMALL, data, queries)
    expect = _exact(data, queries)
    assert np.allclose(_distances(answers), _distances(expect))
    assert metrics.steal_requests == 0 and metrics.stored_series == 1500


def test_equally_split_every_policy_is_exact():
    data, queries = _walks(2000, 64, 2), _walks(12, 64, 3)
    expect = _distances(_exact(data, queries))
    models = Models(LinearModel(1.0, 0.0), SigmoidParams(40, 40, 1, 1, 0))
    for policy in Policy:
        config = replace(SMALL, n_nodes=4, k=4, policy=policy)
        answers, metrics = run_cluster(config, data, queries, models)
        assert np.allclose(_distances(answers), expect)
        assert metrics.post_shutdown_messages == 0
        assert metrics.messages[Kind.LOCAL_ANSWER.value] == 4


def test_partial_replication_answers_once_per_group():
    data, queries = _walks(2000, 64, 4), _walks(10, 64, 5)
    for policy in [Policy.STATIC, Policy.PREDICT_DN]:
        config = replace(SMALL, n_nodes=8, k=4, policy=policy)
        answers, metrics = run_cluster(config, data, queries)
        expect = _distances(_exact(data, queries))
        assert np.allclose(_distances(answers), expect)
        assert metrics.stored_series == 2000 * 2
        placement = [(n.group, n.cluster) for n in metrics.nodes]
        assert placement == [(j % 4, j // 4) for j in range(8)]
        answered = Counter(s.query_id for s in metrics.query_stats)
        assert all(answered[q] == 4 for q in range(10))
        assert metrics.duplicate_leaf_evaluations == 0


def test_knn_and_dtw_across_nodes():
    from series import dtw_distance

    data, queries = _walks(600, 32, 6), _walks(4, 32, 7)
    config = replace(SMALL, w=4, n_nodes=4, k=2, mode=SearchMode(k=5))
    answers, _ = run_cluster(config, data, queries)
    expect = _distances(_exact(data, queries, 5))
    assert np.allclose(_distances(answers), expect)

    dtw = replace(config, mode=SearchMode(dtw_window=3))
    answers, _ = run_cluster(dtw, data[:200], queries)
    for q, answer in zip(queries, answers):
        expect = min(dtw_distance(q, s, 3) for s in data[:200])
        assert math.isclose(answer[0][0], expect, rel_tol=1e-9)


def test_bsf_sharing_only_adds_pruning():
    data, queries = _walks(3000, 64, 8), _walks(10, 64, 9)
    base = replace(
        SMALL,
        n_nodes=4,
        k=4,
        n_threads=1,
        n_sb=1,
        threshold=Threshold(fixed=1 << 40),
        work_stealing=False,
    )
    shared, with_sharing = run_cluster(base, data, queries)
    alone, without = run_cluster(replace(base, share_bsf=False), data, queries)
    assert _distances(shared) == _distances(alone)
    assert with_sharing.pruned_leaves >= without.pruned_leaves
    assert Kind.BSF_SHARE.value not in without.messages


def _steal_setup() -> tuple[Collection, Collection, ClusterConfig]:
    data, queries = _walks(2000, 64, 10), _walks(12, 64, 11)
    config = replace(
        SMALL,
        n_nodes=8,
        k=1,
        policy=Policy.PREDICT_DN,
        n_sb=32,
        threshold=Threshold(fixed=2),
    )
    return data, queries, config


def test_work_stealing_keeps_answers_and_covers_leaves_once():
    data, queries, config = _steal_setup()
    stolen, with_stealing = run_cluster(config, data, queries)
    alone, without = run_cluster(
        replace(config, work_stealing=False), data, queries
    )
    assert _distances(stolen) == _distances(alone)
    assert np.allclose(_distances(stolen), _distances(_exact(data, queries)))
    assert with_stealing.steal_grants > 0 and without.steal_requests == 0
    assert with_stealing.duplicate_leaf_evaluations == 0
    assert with_stealing.max_outstanding_steals == 1
    assert with_stealing.post_shutdown_messages == 0
    thief_jobs = sum(n.stolen_jobs for n in with_stealing.nodes)
    assert thief_jobs == with_stealing.steal_grants


def test_no_peers_means_no_steal_requests():
    data, queries = _walks(1000, 64, 12), _walks(5, 64, 13)
    _, metrics = run_cluster(replace(SMALL, n_nodes=4, k=4), data, queries)
    assert metrics.steal_requests == 0
    assert Kind.DONE.value not in metrics.messages


def test_simulation_is_deterministic():
    data, queries, config = _steal_setup()
    a_answers, a = run_cluster(config, data, queries)
    b_answers, b = run_cluster(config, data, queries)
    assert a.trace == b.trace and a_answers == b_answers
    assert a.makespan == b.makespan
    restored = json.loads(a.to_json())
    assert restored["makespan"] == a.makespan
    assert restored["cluster_max"]["total"] == max(n.total for n in a.nodes)


def test_handle_steal_request_outside_processing_is_empty():
    data, queries, config = _steal_setup()
    plan = plan_partition(data, 1, Method.EQUALLY_SPLIT, config.w)
    prepared = [Query.prepare(i, q, config.w) for i, q in enumerate(queries)]
    sim = Simulation(config, data, prepared, plan, LinearModel.identity())
    node = sim.nodes[1]
    node.handle_steal_request(2, 0.0)
    assert sim.empty_grants == 1 and sim.steal_grants == 0


def test_same_instant_actions_run_in_schedule_order():
    data, queries = _walks(64, 16, 14), _walks(1, 16, 15)
    config = replace(SMALL, w=4)
    plan = plan_partition(data, 1, Method.EQUALLY_SPLIT, config.w)
    prepared = [Query.prepare(0, queries[0], config.w)]
    sim = Simulation(config, data, prepared, plan, LinearModel.identity())
    seen: list[tuple[str, float]] = []

    def note(name: str) -> Callable[[float], None]:
        return lambda at: seen.append((name, at))

    def chain(at: float) -> None:
        seen.append(("b", at))
        sim.schedule(at, note("c"))

    sim.schedule(3.0, note("a"))
    sim.schedule(1.0, chain)
    sim.schedule(3.0, note("d"))
    sim.schedule(1.0, note("e"))
    sim.engine.run()
    assert seen == [("b", 1.0), ("e", 1.0), ("c", 1.0), ("a", 3.0), ("d", 3.0)]
    assert sim.fired == 5 and not sim.slots
