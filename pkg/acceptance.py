"""Full-size end-to-end runs: stealing, replication and the exactness grid.

Each run simulates a whole cluster, so these are marked slow and left
out of test.sh. Run them with `pytest -m slow acceptance.py`.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from cluster import ClusterConfig, RunMetrics, run_cluster
from dataset import brute_force_knn, compare_answers
from partition import Method, plan_partition
from schedule import Policy
from series import Collection, z_normalize_all

LENGTH = 64
BASE = ClusterConfig(w=8, leaf_capacity=16, n_threads=2)


def _walks(count: int, rng: np.random.Generator) -> Collection:
    return z_normalize_all(rng.normal(size=(count, LENGTH)).cumsum(axis=1))


def _answering_span(metrics: RunMetrics) -> float:
    """Virtual time from the indexes being ready to the final merge."""
    return metrics.makespan - metrics.cluster_max()["index"]


def _dense_cluster_batch(seed: int) -> tuple[Collection, Collection]:
    """100 queries found at distance 0, then one inside a dense cluster.

    The cluster is 5000 noisy copies of one white-noise series, so its
    members straddle every root region and the query close to them has
    to visit all of their leaves.
    """
    rng = np.random.default_rng(seed)
    walks = _walks(5000, rng)
    center = rng.normal(size=LENGTH)
    dense = z_normalize_all(center + rng.normal(0, 1.0, (5000, LENGTH)))
    data = np.vstack([walks, dense])
    cheap = walks[rng.choice(len(walks), size=100, replace=False)]
    hard = z_normalize_all((center + rng.normal(0, 1.0, LENGTH))[np.newaxis])
    return data, np.vstack([cheap, hard])


@pytest.mark.slow
def test_work_stealing_shortens_a_skewed_batch():
    config = replace(BASE, n_nodes=8, k=1, policy=Policy.PREDICT_DN, n_sb=64)
    ratios: list[float] = []
    for seed in range(3):
        data, queries = _dense_cluster_batch(seed)
        stolen, with_stealing = run_cluster(config, data, queries)
        alone, without = run_cluster(
            replace(config, work_stealing=False), data, queries
        )
        assert compare_answers(stolen, brute_force_knn(data, queries)) == []
        assert compare_answers(stolen, alone) == []
        assert with_stealing.steal_grants > 0
        ratio = _answering_span(with_stealing) / _answering_span(without)
        ratios.append(ratio)
    assert min(ratios) <= 0.85, ratios


@pytest.mark.slow
def test_more_replication_answers_faster_and_stores_more():
    rng = np.random.default_rng(5)
    data, queries = _walks(6000, rng), _walks(40, rng)
    spans: list[float] = []
    stored: list[int] = []
    for k in [8, 4, 1]:
        config = replace(BASE, n_nodes=8, k=k, policy=Policy.PREDICT_DN)
        answers, metrics = run_cluster(config, data, queries)
        assert compare_answers(answers, brute_force_knn(data, queries)) == []
        spans.append(_answering_span(metrics))
        stored.append(metrics.stored_series)
    assert stored == [6000, 6000 * 2, 6000 * 8]
    # equally-split, then partial-2, then full replication
    assert spans[1] <= 1.1 * spans[0] and spans[2] <= 1.1 * spans[1], spans


@pytest.mark.slow
def test_density_aware_grid_is_exact():
    rng = np.random.default_rng(6)
    data, queries = _walks(3000, rng), _walks(8, rng)
    expect = brute_force_knn(data, queries)
    for n_nodes, k in [(4, 1), (4, 2), (8, 4), (8, 8)]:
        plan = plan_partition(data, k, Method.DENSITY_AWARE, BASE.w, lam=20)
        for policy in Policy:
            for stealing in [False, True]:
                for sharing in [False, True]:
                    config = replace(
                        BASE,
                        n_nodes=n_nodes,
                        k=k,
                        partition=Method.DENSITY_AWARE,
                        policy=policy,
                        lam=20,
                        n_sb=8,
                        work_stealing=stealing,
                        share_bsf=sharing,
                    )
                    answers, metrics = run_cluster(
                        config, data, queries, plan=plan
                    )
                    setting = (n_nodes, k, policy.value, stealing, sharing)
                    assert compare_answers(answers, expect) == [], setting
                    assert metrics.duplicate_leaf_evaluations == 0, setting
                    assert metrics.post_shutdown_messages == 0, setting
