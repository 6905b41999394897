"""Displacement errors, best-of-K scoring, OOD precision/recall and generator purity."""

from __future__ import annotations

import csv
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mgtraj.datamodel import PredictionSet

CSV_COLUMNS = ("episode_id", "min_ade", "min_fde", "precision", "recall", "f1", "purity", "active_generators")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim != 2 or len(pred) == 0:
        raise ValueError("expected nonempty (t_fut, 2) trajectories")
    return pred, gt


def ade(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def _trajectories(preds) -> np.ndarray:
    if isinstance(preds, PredictionSet):
        return preds.trajectories()
    return np.asarray(preds, dtype=np.float64)


def min_of_k(preds, gt) -> tuple[float, float]:
    """(min ADE, min FDE) over the K samples, each minimized on its own."""
    trajs = _trajectories(preds)
    if len(trajs) == 0:
        raise ValueError("empty prediction set")
    gt = np.asarray(gt, dtype=np.float64)
    if trajs.shape[1:] != gt.shape:
        raise ValueError(f"sample shape {trajs.shape[1:]} does not match ground truth {gt.shape}")
    dist = np.linalg.norm(trajs - gt[None], axis=-1)  # (K, t_fut)
    return float(dist.mean(axis=1).min()), float(dist[:, -1].min())


def ade_matrix(trajs: np.ndarray, futures: np.ndarray) -> np.ndarray:
    """(K, M) ADE between every sample and every ground-truth future."""
    trajs = np.asarray(trajs, dtype=np.float64)
    futures = np.asarray(futures, dtype=np.float64)
    return np.linalg.norm(trajs[:, None] - futures[None], axis=-1).mean(axis=-1)


def precision_recall(preds, gt_futures, eps: float) -> tuple[float, float]:
    """A sample is in-distribution iff its ADE to the nearest future is <= eps.

    precision: in-distribution fraction of samples. recall: fraction of
    futures with at least one sample within eps.
    """
    futures = np.asarray(gt_futures, dtype=np.float64)
    if futures.ndim == 2:
        futures = futures[None]
    if len(futures) == 0:
        raise ValueError("need at least one ground-truth future")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    trajs = _trajectories(preds)
    if len(trajs) == 0:
        return 0.0, 0.0
    d = ade_matrix(trajs, futures)
    within = d <= eps
    return float(within.any(axis=1).mean()), float(within.any(axis=0).mean())


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def nearest_future_labels(trajs, gt_futures) -> tuple[np.ndarray, np.ndarray]:
    """(index of nearest future, ADE to it) per sample."""
    d = ade_matrix(trajs, gt_futures)
    labels = d.argmin(axis=1)
    return labels, d[np.arange(len(labels)), labels]


def manifold_purity(generator_indices, manifold_labels, in_distribution=None) -> float:
    """Share of in-distribution samples carrying their generator's majority manifold label."""
    g = np.asarray(generator_indices)
    m = np.asarray(manifold_labels)
    if in_distribution is not None:
        keep = np.asarray(in_distribution, dtype=bool)
        g, m = g[keep], m[keep]
    if len(g) == 0:
        raise ValueError("purity needs at least one in-distribution sample")
    by_gen: dict = defaultdict(Counter)
    for gi, mi in zip(g.tolist(), m.tolist()):
        by_gen[gi][mi] += 1
    majority = sum(c.most_common(1)[0][1] for c in by_gen.values())
    return majority / len(g)


@dataclass
class EpisodeMetrics:
    episode_id: object
    min_ade: float
    min_fde: float
    precision: float
    recall: float
    f1: float
    purity: float
    active_generators: int
    # per-sample detail kept for pooled purity and generator counts
    generator_indices: np.ndarray
    manifold_labels: np.ndarray
    in_distribution: np.ndarray


def evaluate_prediction(
    episode_id, preds: PredictionSet, gt_futures, realized: np.ndarray, eps: float, active_generators: int
) -> EpisodeMetrics:
    trajs = preds.trajectories()
    min_ade, min_fde = min_of_k(trajs, realized)
    p, r = precision_recall(trajs, gt_futures, eps)
    labels, dist = nearest_future_labels(trajs, np.asarray(gt_futures))
    ind = dist <= eps
    gidx = preds.generator_indices()
    purity = manifold_purity(gidx, labels, ind) if ind.any() else float("nan")
    return EpisodeMetrics(episode_id, min_ade, min_fde, p, r, f1_score(p, r), purity, active_generators, gidx, labels, ind)


@dataclass
class MetricReport:
    min_ade: float
    min_fde: float
    precision: float
    recall: float
    f1: float
    purity: float
    generator_counts: dict
    n_episodes: int
    recall_degenerate: bool = False

    def row(self) -> dict:
        return {
            "episode_id": "aggregate",
            "min_ade": self.min_ade,
            "min_fde": self.min_fde,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "purity": self.purity,
            "active_generators": len([g for g, c in self.generator_counts.items() if c > 0]),
        }


def aggregate(rows: Sequence[EpisodeMetrics], recall_degenerate: bool = False) -> MetricReport:
    """Means over episodes; purity is pooled over all in-distribution samples."""
    if not rows:
        nan = float("nan")
        return MetricReport(nan, nan, nan, nan, nan, nan, {}, 0, recall_degenerate)
    mean = lambda name: float(np.mean([getattr(r, name) for r in rows]))  # noqa: E731
    p, r = mean("precision"), mean("recall")
    g = np.concatenate([x.generator_indices for x in rows])
    m = np.concatenate([x.manifold_labels for x in rows])
    ind = np.concatenate([x.in_distribution for x in rows])
    purity = manifold_purity(g, m, ind) if ind.any() else float("nan")
    counts = dict(sorted(Counter(g.tolist()).items()))
    return MetricReport(mean("min_ade"), mean("min_fde"), p, r, f1_score(p, r), purity, counts, len(rows), recall_degenerate)


def write_metrics_csv(path, rows: Sequence[EpisodeMetrics], report: MetricReport, flag: str | None = None):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([r.episode_id, *(_fmt(getattr(r, c)) for c in CSV_COLUMNS[1:])])
        agg = report.row()
        if flag:
            agg["episode_id"] = f"aggregate[{flag}]"
        writer.writerow([agg[c] if c == "episode_id" else _fmt(agg[c]) for c in CSV_COLUMNS])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"
