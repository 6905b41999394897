"""Run a trained model over episodes and score it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from mgtraj.datamodel import TrajectoryEpisode
from mgtraj.metrics import EpisodeMetrics, MetricReport, aggregate, evaluate_prediction
from mgtraj.model import EpisodeBatch, MGModel, batch_from_episodes, predict


@dataclass
class Evaluation:
    rows: list[EpisodeMetrics]
    report: MetricReport
    mean_priors: np.ndarray
    active_generators: list[int]


@torch.no_grad()
def mean_priors(model: MGModel, batch: EpisodeBatch) -> np.ndarray:
    if len(batch) == 0:
        return np.full(model.cfg.n_G, np.nan)
    p, _, _ = model.priors(model.condition(batch))
    return p.double().mean(dim=0).numpy()


def evaluate(
    model: MGModel,
    episodes: list[TrajectoryEpisode],
    scenes,
    eps: float,
    K: int | None = None,
    seed: int = 0,
    batch: EpisodeBatch | None = None,
) -> Evaluation:
    """Best-of-K errors, OOD precision/recall and purity for every target in ``episodes``.

    Generators count as active when their prior averaged over all targets
    exceeds the activation threshold.
    """
    model.eval()
    cfg = model.cfg
    K = K or cfg.K
    if batch is None:
        batch = batch_from_episodes(episodes, scenes, cfg, dtype=next(model.parameters()).dtype)
    priors = mean_priors(model, batch)
    active = [g for g in range(cfg.n_G) if priors[g] > cfg.activation_threshold]
    rows = []
    if len(batch):
        preds = predict(model, batch, K, seed)
        for b, pset in enumerate(preds):
            ep = episodes[int(batch.episode_index[b])]
            agent = ep.agent(pset.agent_id)
            rows.append(
                evaluate_prediction(
                    f"{int(batch.episode_index[b])}:{pset.agent_id}",
                    pset,
                    np.stack(agent.futures),
                    agent.future,
                    eps,
                    len(active),
                )
            )
    degenerate = bool(rows) and all(len(ep.agent(t).futures) == 1 for ep in episodes for t in [a.agent_id for a in ep.targets()])
    return Evaluation(rows, aggregate(rows, degenerate), priors, active)
