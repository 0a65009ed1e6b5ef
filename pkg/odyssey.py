"""Command line driver: datasets, calibration, plans, runs and reports.

    odyssey generate   --count N --length L --seed S --out data.bin
    odyssey import     --raw file.f32 --length L --out data.bin
    odyssey calibrate  --data data.bin --out models.json
    odyssey build-plan --data data.bin --replication K --out plan.json
    odyssey run        --data data.bin --queries q.bin --answers a.csv
    odyssey oracle     --data data.bin --queries q.bin --out o.csv
    odyssey report     metrics.json

Series are z-normalized on load. ODYSSEY_SEED overrides every --seed.
"""
from __future__ import annotations

import argparse
from collections import Counter
from dataclasses import dataclass, replace
import json
import logging
import os
from pathlib import Path
import sys
from typing import TYPE_CHECKING, Sequence

import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from cluster import ClusterConfig, run_cluster
from dataset import (
    CorruptFile,
    brute_force_knn,
    compare_answers,
    generate_random_walk,
    import_raw,
    read_answers,
    read_dataset,
    write_answers,
    write_dataset,
)
from index import IndexStats, build_index, partition_rs_batches
from partition import (
    InvalidConfig,
    Method,
    PartitionPlan,
    PlanStats,
    plan_partition,
)
from predict import DegenerateFit, Models, fit_models
from schedule import Policy
from search import (
    TH_DIVISOR,
    UNBOUNDED,
    Query,
    SearchMode,
    SimCosts,
    Threshold,
    collect_samples,
)
from series import Collection, InvalidInput, z_normalize, z_normalize_all

if TYPE_CHECKING:
    import pytest

WARMUP_QUERIES = 40
SEED_ENV = "ODYSSEY_SEED"

log = logging.getLogger("odyssey")


def parse_mode(text: str) -> SearchMode:
    """'1nn', 'knn:K', 'dtw:R' or both, e.g. 'knn:5,dtw:3'."""
    k, window = 1, 0
    for part in text.lower().split(","):
        name, _, value = part.strip().partition(":")
        try:
            if name == "1nn" and not value:
                continue
            if name == "knn":
                k = int(value)
            elif name == "dtw":
                window = int(value)
            else:
                raise ValueError(part)
        except ValueError:
            raise argparse.ArgumentTypeError(
                f"bad search mode {text!r}"
            ) from None
    if k < 1 or window < 0:
        raise argparse.ArgumentTypeError(f"bad search mode {text!r}")
    return SearchMode(k, window)


def load_collection(path: Path) -> Collection:
    return z_normalize_all(read_dataset(path))


def seed_from(args: argparse.Namespace) -> int:
    return int(os.environ.get(SEED_ENV, args.seed))


def warmup_queries(
    data: Collection, count: int, seed: int, w: int, mode: SearchMode
) -> list[Query]:
    """Dataset series with noise of widely varying strength."""
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(data), size=min(count, len(data)), replace=False)
    noise = rng.permutation(np.geomspace(0.01, 2.0, len(picks)))
    ret = []
    for i, (j, s) in enumerate(zip(picks, noise)):
        series = z_normalize(data[j] + rng.normal(0, s, data.shape[1]))
        ret.append(Query.prepare(i, series, w, mode))
    return ret


def calibrate(
    data: Collection,
    w: int,
    leaf_capacity: int,
    n_sb: int,
    mode: SearchMode,
    seed: int,
    count: int = WARMUP_QUERIES,
    costs: SimCosts = SimCosts(),
) -> Models:
    tree, _ = build_index(
        data, np.arange(len(data), dtype=np.int64), w, leaf_capacity
    )
    batches = partition_rs_batches(tree, n_sb)
    queries = warmup_queries(data, count, seed, w, mode)
    samples = collect_samples(queries, tree, batches, mode, costs)
    log.info("calibrating on %d warm-up queries", len(samples))
    return fit_models(samples, seed)


@dataclass(frozen=True)
class RunConfig:
    data: Path
    queries: Path
    answers: Path
    cluster: ClusterConfig
    models: Path | None = None
    plan: Path | None = None
    metrics: Path | None = None
    query_stats: Path | None = None
    trace: bool = False

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> RunConfig:
        if args.th is not None:
            threshold = Threshold(fixed=args.th)
        elif args.unbounded_th:
            threshold = Threshold(fixed=UNBOUNDED)
        else:
            threshold = Threshold(divisor=args.th_divisor)
        cluster = ClusterConfig(
            n_nodes=args.nodes,
            k=args.nodes if args.replication is None else args.replication,
            policy=Policy(args.scheduler),
            partition=Method(args.partition),
            seed=seed_from(args),
            lam=args.lam,
            balance_tolerance=args.balance_tolerance,
            w=args.segments,
            leaf_capacity=args.leaf_capacity,
            n_threads=args.threads,
            n_sb=args.rs_batches,
            help_th=args.help_th,
            mode=args.mode,
            threshold=threshold,
            share_bsf=args.share_bsf,
            work_stealing=args.work_stealing,
            n_send=args.n_send,
            costs=replace(SimCosts(), latency=args.latency),
            build_workers=args.build_workers,
        )
        return cls(
            args.data,
            args.queries,
            args.answers,
            cluster,
            args.models,
            args.plan,
            args.metrics,
            args.query_stats,
            args.trace,
        )

    def problems(self) -> list[str]:
        ret = self.cluster.problems()
        for path in [self.data, self.queries, self.models, self.plan]:
            if path is not None and not path.is_file():
                ret.append(f"{path}: no such file")
        return ret

    def validate(self) -> None:
        if problems := self.problems():
            raise InvalidConfig("; ".join(problems))


def run_experiment(config: RunConfig) -> int:
    config.validate()
    c = config.cluster
    data = load_collection(config.data)
    queries = load_collection(config.queries)
    if config.models is not None:
        models = Models.load(config.models)
    else:
        models = calibrate(data, c.w, c.leaf_capacity, c.n_sb, c.mode, c.seed)
    plan = PartitionPlan.load(config.plan) if config.plan else None
    answers, metrics = run_cluster(c, data, queries, models, plan)
    write_answers(answers, config.answers)
    if config.metrics is not None:
        config.metrics.write_text(metrics.to_json(config.trace))
    if config.query_stats is not None:
        with config.query_stats.open("w") as f:
            for stats in metrics.query_stats:
                print(stats.to_json(), file=f)
    log.info("answers in %s, makespan %.1f", config.answers, metrics.makespan)
    return 0


def render_report(path: Path, console: Console) -> None:
    metrics = json.loads(path.read_text())
    nodes = Table(title="Per-node times (work units)")
    for column in ["node", "group", "cluster"]:
        nodes.add_column(column, justify="right")
    for column in ["buffer", "tree", "index", "answering", "total"]:
        nodes.add_column(column, justify="right")
    nodes.add_column("queries", justify="right")
    nodes.add_column("stolen jobs", justify="right")
    for n in metrics["nodes"]:
        nodes.add_row(
            *(str(n[s]) for s in ["node", "group", "cluster"]),
            *(
                f"{n[s]:.1f}"
                for s in ["buffer", "tree", "index", "answering", "total"]
            ),
            str(n["queries"]),
            str(n["stolen_jobs"]),
        )
    console.print(nodes)

    summary = Table(title="Run")
    summary.add_column("measure")
    summary.add_column("value", justify="right")
    summary.add_row("makespan", f"{metrics['makespan']:.1f}")
    for stage, value in metrics["cluster_max"].items():
        summary.add_row(f"max {stage} time", f"{value:.1f}")
    for key in [
        "steal_requests",
        "steal_grants",
        "empty_grants",
        "stolen_batches",
        "max_outstanding_steals",
        "post_shutdown_messages",
        "duplicate_leaf_evaluations",
        "stored_series",
    ]:
        summary.add_row(key.replace("_", " "), str(metrics[key]))
    pruned = sum(q["pruned_leaves"] for q in metrics["query_stats"])
    summary.add_row("pruned leaves", str(pruned))
    console.print(summary)

    messages = Table(title="Messages")
    messages.add_column("kind")
    messages.add_column("count", justify="right")
    for kind, n in sorted(metrics["messages"].items()):
        messages.add_row(kind, str(n))
    console.print(messages)


# Subcommands


def cmd_generate(args: argparse.Namespace) -> int:
    data = generate_random_walk(args.count, args.length, seed_from(args))
    write_dataset(data, args.out)
    log.info("generated %d random walks of length %d", *data.shape)
    return 0


def cmd_import(args: argparse.Namespace) -> int:
    import_raw(args.raw, args.length, args.out)
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    data = load_collection(args.data)
    models = calibrate(
        data,
        args.segments,
        args.leaf_capacity,
        args.rs_batches,
        args.mode,
        seed_from(args),
        args.warmup,
    )
    models.save(args.out)
    return 0


def cmd_build_plan(args: argparse.Namespace) -> int:
    data = load_collection(args.data)
    plan = plan_partition(
        data,
        args.replication,
        Method(args.partition),
        args.segments,
        seed_from(args),
        args.lam,
        args.balance_tolerance,
        args.build_workers,
    )
    plan.save(args.out)
    stats = PlanStats.of(plan, data, args.segments)
    log.info(
        "chunk sizes %s, imbalance %.3f, %d split buffers, "
        "%d of %d neighbouring buffers co-located",
        stats.sizes,
        stats.imbalance,
        len(plan.split_buffers),
        stats.collocated_neighbors,
        stats.neighbor_pairs,
    )
    if args.index_stats:
        for c, chunk in enumerate(plan.chunks):
            ids = np.asarray(chunk, dtype=np.int64)
            tree, _ = build_index(data[ids], ids, args.segments)
            log.info("chunk %d: %s", c, IndexStats.of(tree).to_json())
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    return run_experiment(RunConfig.from_args(args))


def cmd_oracle(args: argparse.Namespace) -> int:
    data = load_collection(args.data)
    queries = load_collection(args.queries)
    mode: SearchMode = args.mode
    expect = brute_force_knn(data, queries, mode.k, mode.dtw_window)
    if args.out is not None:
        write_answers(expect, args.out)
    if args.check is None:
        return 0
    mismatches = compare_answers(read_answers(args.check), expect)
    for line in mismatches:
        log.error(line)
    if mismatches:
        return 1
    log.info("%s matches the oracle on %d queries", args.check, len(expect))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    render_report(args.metrics, Console())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odyssey", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def index_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--segments", type=int, default=ClusterConfig.w)
        p.add_argument(
            "--leaf-capacity", type=int, default=ClusterConfig.leaf_capacity
        )
        p.add_argument("--rs-batches", type=int, default=ClusterConfig.n_sb)
        p.add_argument("--mode", type=parse_mode, default=SearchMode())
        p.add_argument("--seed", type=int, default=0)

    def plan_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument(
            "--partition",
            choices=[m.value for m in Method],
            default=Method.EQUALLY_SPLIT.value,
        )
        p.add_argument("--lam", type=int, default=ClusterConfig.lam)
        p.add_argument(
            "--balance-tolerance",
            type=float,
            default=ClusterConfig.balance_tolerance,
        )
        p.add_argument("--build-workers", type=int, default=1)

    p = sub.add_parser("generate", help="random-walk collection")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("import", help="convert raw float32 series")
    p.add_argument("--raw", type=Path, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("calibrate", help="fit the prediction models")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--warmup", type=int, default=WARMUP_QUERIES)
    p.add_argument("--out", type=Path, required=True)
    index_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("build-plan", help="partition the collection")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--replication", type=int, required=True)
    p.add_argument("--segments", type=int, default=ClusterConfig.w)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--index-stats", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    plan_flags(p)
    p.set_defaults(func=cmd_build_plan)

    p = sub.add_parser("run", help="answer queries on a simulated cluster")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--queries", type=Path, required=True)
    p.add_argument("--models", type=Path)
    p.add_argument("--plan", type=Path)
    p.add_argument("--answers", type=Path, required=True)
    p.add_argument("--metrics", type=Path)
    p.add_argument("--query-stats", type=Path, help="JSON lines, one per query")
    p.add_argument("--trace", action="store_true")
    p.add_argument("--nodes", type=int, default=1)
    p.add_argument("--replication", type=int, help="groups; default nodes")
    p.add_argument(
        "--scheduler",
        choices=[policy.value for policy in Policy],
        default=Policy.PREDICT_DN.value,
    )
    p.add_argument("--threads", type=int, default=ClusterConfig.n_threads)
    p.add_argument("--help-th", type=int, default=ClusterConfig.help_th)
    p.add_argument("--n-send", type=int, default=ClusterConfig.n_send)
    p.add_argument("--th", type=int, help="fixed queue size threshold")
    p.add_argument("--unbounded-th", action="store_true")
    p.add_argument("--th-divisor", type=float, default=TH_DIVISOR)
    p.add_argument("--latency", type=float, default=SimCosts.latency)
    p.add_argument("--no-share-bsf", dest="share_bsf", action="store_false")
    p.add_argument("--no-stealing", dest="work_stealing", action="store_false")
    index_flags(p)
    plan_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="brute-force answers")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--queries", type=Path, required=True)
    p.add_argument("--mode", type=parse_mode, default=SearchMode())
    p.add_argument("--out", type=Path)
    p.add_argument("--check", type=Path, help="answers file to verify")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="render a metrics file")
    p.add_argument("metrics", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(show_path=False)],
        force=True,
    )
    try:
        return int(args.func(args))
    except (InvalidConfig, InvalidInput, CorruptFile, DegenerateFit) as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())


# Unit tests


def test_parse_mode():
    assert parse_mode("1nn") == SearchMode()
    assert parse_mode("knn:5") == SearchMode(k=5)
    assert parse_mode("dtw:3") == SearchMode(dtw_window=3)
    assert parse_mode("knn:2, dtw:4") == SearchMode(2, 4)
    for bad in ["2nn", "knn", "knn:0", "dtw:x"]:
        try:
            parse_mode(bad)
        except argparse.ArgumentTypeError:
            pass
        else:
            assert False, f"accepted {bad!r}"


def test_run_config_lists_every_problem(tmp_path: Path):
    command = (
        f"run --data {tmp_path}/missing.bin --queries {tmp_path}/q.bin"
        f" --answers {tmp_path}/a.csv"
    )
    args = build_parser().parse_args(f"{command} --nodes 3 --threads 0".split())
    problems = RunConfig.from_args(args).problems()
    assert len(problems) == 5
    assert any("node count 3" in p for p in problems)
    assert any("missing.bin" in p for p in problems)
    assert main(command.split()) == 2


def _generate(tmp_path: Path) -> tuple[Path, Path]:
    data, queries = tmp_path / "data.bin", tmp_path / "queries.bin"
    assert main(f"generate --count 600 --length 64 --out {data}".split()) == 0
    command = f"generate --count 8 --length 64 --seed 2 --out {queries}"
    assert main(command.split()) == 0
    return data, queries


def test_end_to_end_run_matches_oracle(tmp_path: Path):
    data, queries = _generate(tmp_path)
    models, metrics = tmp_path / "models.json", tmp_path / "metrics.json"
    index = "--segments 8 --leaf-capacity 32"
    command = f"calibrate --data {data} {index} --warmup 12 --out {models}"
    assert main(command.split()) == 0
    run = (
        f"run --data {data} --queries {queries} --models {models}"
        f" --nodes 4 --replication 2 --threads 2 {index}"
    )
    first, second = tmp_path / "a1.csv", tmp_path / "a2.csv"
    stats = tmp_path / "stats.jsonl"
    command = f"{run} --answers {first} --metrics {metrics}"
    assert main(f"{command} --query-stats {stats}".split()) == 0
    lines = [json.loads(line) for line in stats.read_text().splitlines()]
    # each of the 2 groups answers every query on its chunk once
    assert Counter(s["query_id"] for s in lines) == {q: 2 for q in range(8)}
    assert all(s["leaves"] >= s["visited_leaves"] for s in lines)
    assert main(f"{run} --answers {second}".split()) == 0
    assert first.read_bytes() == second.read_bytes()
    oracle = f"oracle --data {data} --queries {queries}"
    assert main(f"{oracle} --check {first}".split()) == 0
    assert main(["report", str(metrics)]) == 0
    assert json.loads(metrics.read_text())["stored_series"] == 600 * 2


def test_plan_replay_and_knn(tmp_path: Path):
    data, queries = _generate(tmp_path)
    plan, answers = tmp_path / "plan.json", tmp_path / "a.csv"
    method = "--segments 8 --partition density-aware --lam 50"
    command = f"build-plan --data {data} --replication 2 {method} --out {plan}"
    assert main(command.split()) == 0
    command = (
        f"run --data {data} --queries {queries} --plan {plan} --nodes 2"
        f" --replication 2 {method} --leaf-capacity 32 --mode knn:3"
        f" --scheduler static --answers {answers}"
    )
    assert main(command.split()) == 0
    assert all(len(a) == 3 for a in read_answers(answers))
    oracle = f"oracle --data {data} --queries {queries} --check {answers}"
    assert main(f"{oracle} --mode knn:3".split()) == 0
    assert main(oracle.split()) == 1


def test_seed_from_environment(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch
):
    monkeypatch.setenv(SEED_ENV, "7")
    out = tmp_path / "d.bin"
    command = f"generate --count 3 --length 4 --seed 1 --out {out}"
    assert main(command.split()) == 0
    assert np.array_equal(read_dataset(out), generate_random_walk(3, 4, 7))
