import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgtraj.datamodel import PredictionSample, PredictionSet
from mgtraj.metrics import (
    CSV_COLUMNS,
    aggregate,
    ade,
    evaluate_prediction,
    f1_score,
    fde,
    manifold_purity,
    min_of_k,
    precision_recall,
    write_metrics_csv,
)


def naive_ade(pred, gt):
    total = 0.0
    for t in range(len(pred)):
        dx = pred[t][0] - gt[t][0]
        dy = pred[t][1] - gt[t][1]
        total += math.sqrt(dx * dx + dy * dy)
    return total / len(pred)


def naive_fde(pred, gt):
    dx = pred[-1][0] - gt[-1][0]
    dy = pred[-1][1] - gt[-1][1]
    return math.sqrt(dx * dx + dy * dy)


def naive_min_of_k(samples, gt):
    best_a = best_f = math.inf
    for s in samples:
        best_a = min(best_a, naive_ade(s, gt))
        best_f = min(best_f, naive_fde(s, gt))
    return best_a, best_f


GT = np.stack([np.arange(12.0), np.zeros(12)], axis=1)


def test_ade_examples():
    assert ade(GT, GT) == 0.0
    assert ade(GT + [3.0, 4.0], GT) == pytest.approx(5.0)
    half = GT.copy()
    half[:6] += [3.0, 4.0]
    assert ade(half, GT) == pytest.approx(2.5)


def test_fde_examples():
    assert fde(GT, GT) == 0.0
    moved = GT.copy()
    moved[-1] += [0.0, 2.0]
    assert fde(moved, GT) == pytest.approx(2.0)
    interior = GT + 1.0
    interior[-1] = GT[-1]
    assert fde(interior, GT) == 0.0


def test_length_mismatch():
    with pytest.raises(ValueError):
        ade(GT[:5], GT)
    with pytest.raises(ValueError):
        fde(GT[:5], GT)


def test_min_of_k_examples():
    same = np.stack([GT + 1.0] * 5)
    assert min_of_k(same, GT) == pytest.approx((ade(GT + 1.0, GT), fde(GT + 1.0, GT)))
    with_exact = np.stack([GT + 1.0, GT, GT - 2.0])
    assert min_of_k(with_exact, GT) == (0.0, 0.0)
    with pytest.raises(ValueError):
        min_of_k(np.zeros((0, 12, 2)), GT)


def test_min_of_k_minimizes_each_metric_independently():
    a = GT.copy()
    a[-1] += [0, 10]  # good ADE, bad FDE
    b = GT + [0.0, 1.0]
    b[-1] = GT[-1]  # worse ADE, perfect FDE
    m_ade, m_fde = min_of_k(np.stack([a, b]), GT)
    assert m_ade == pytest.approx(ade(a, GT)) and m_fde == 0.0


def test_metrics_match_naive_loops():
    rng = np.random.default_rng(0)
    for _ in range(500):
        t = rng.integers(1, 15)
        gt = rng.normal(size=(t, 2)) * rng.uniform(0.1, 100)
        samples = gt + rng.normal(size=(rng.integers(1, 6), t, 2)) * rng.uniform(0.01, 10)
        assert abs(ade(samples[0], gt) - naive_ade(samples[0], gt)) <= 1e-12 * max(1, naive_ade(samples[0], gt))
        assert abs(fde(samples[0], gt) - naive_fde(samples[0], gt)) <= 1e-12 * max(1, naive_fde(samples[0], gt))
        got = min_of_k(samples, gt)
        want = naive_min_of_k(samples, gt)
        assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_min_of_k_monotone_under_inclusion(k, extra, seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(4, 2))
    small = rng.normal(size=(k, 4, 2)) * 3
    big = np.concatenate([small, rng.normal(size=(extra, 4, 2)) * 3])
    a_small, f_small = min_of_k(small, gt)
    a_big, f_big = min_of_k(big, gt)
    assert a_big <= a_small and f_big <= f_small


def _pset(trajs, gens=None):
    gens = gens if gens is not None else [0] * len(trajs)
    return PredictionSet("a", tuple(PredictionSample(np.asarray(t), g) for t, g in zip(trajs, gens)))


def test_precision_recall_examples():
    futures = np.stack([GT, GT + [0.0, 10.0]])
    close = [GT + 0.1, GT + [0.0, 10.2]]
    assert precision_recall(_pset(close), futures, 1.0) == (1.0, 1.0)
    one_side = [GT + 0.1, GT - 0.1]
    assert precision_recall(one_side, futures, 1.0) == (1.0, 0.5)
    ood = [GT + [0.0, 5.0], GT + 0.1]
    assert precision_recall(ood, futures, 1.0) == (0.5, 0.5)
    assert precision_recall(ood, futures, 1e9) == (1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_precision_recall_translation_invariant(seed, dx, dy):
    rng = np.random.default_rng(seed)
    futures = rng.normal(size=(3, 6, 2)) * 4
    preds = futures[rng.integers(0, 3, 10)] + rng.normal(size=(10, 6, 2))
    eps = 1.0
    base = precision_recall(preds, futures, eps)
    shift = np.array([dx, dy])
    # keep samples away from the eps boundary so rounding cannot flip membership
    from mgtraj.metrics import ade_matrix

    d = ade_matrix(preds, futures)
    if np.any(np.abs(d - eps) < 1e-6):
        return
    assert precision_recall(preds + shift, futures + shift, eps) == base


def test_f1():
    assert f1_score(0.0, 0.0) == 0.0
    assert f1_score(0.5, 1.0) == pytest.approx(2 / 3)


def test_purity_examples():
    assert manifold_purity([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert manifold_purity([0, 0, 1, 1], [0, 1, 0, 1]) == 0.5
    assert manifold_purity([2, 2, 2], [0, 0, 0]) == 1.0
    assert manifold_purity([0, 1, 1], [0, 0, 1], in_distribution=[True, False, True]) == 1.0
    with pytest.raises(ValueError):
        manifold_purity([0], [0], in_distribution=[False])


def test_csv_layout(tmp_path):
    futures = np.stack([GT, GT + [0.0, 10.0]])
    m = evaluate_prediction("e0", _pset([GT, GT + [0, 10]], [0, 1]), futures, GT, 1.0, 2)
    report = aggregate([m])
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, [m], report)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[1][0] == "e0" and rows[-1][0] == "aggregate"
    assert float(rows[1][CSV_COLUMNS.index("purity")]) == 1.0


def test_empty_aggregate_is_flagged(tmp_path):
    report = aggregate([])
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [], report, flag="empty")
    rows = list(csv.reader(path.open()))
    assert len(rows) == 2 and rows[1][0] == "aggregate[empty]"
