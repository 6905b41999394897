"""Full forecaster: encoders, fused graph, generator bank, discriminator and selector.

Everything that does not depend on parameters (scene crops, neighbor cell
indices, padding) is precomputed once per dataset in :class:`EpisodeBatch`;
minibatches are row selections of it.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from mgtraj.datamodel import (
    ModelConfig,
    PredictionSample,
    PredictionSet,
    SceneGrid,
    TrajectoryEpisode,
)
from mgtraj.encoders import (
    PhysicalAttention,
    PhysicalEncoder,
    SocialAttention,
    SocialEncoder,
    build_condition,
    path_displacements,
    scene_crops,
)
from mgtraj.gan import CheckpointError, Discriminator, GeneratorBank, read_checkpoint, save_checkpoint
from mgtraj.selector import Selector, threshold_priors
from mgtraj.stgraph import STGraphEncoder, graph_cells, pool_social


@dataclass
class EpisodeBatch:
    """Padded tensors for a list of (episode, target) pairs."""

    obs: torch.Tensor  # (B, T, 2) target observed positions
    neighbor_obs: torch.Tensor  # (B, N, T, 2)
    neighbor_mask: torch.Tensor  # (B, N)
    neighbor_rel: torch.Tensor  # (B, N, 2) offset from the target at the last observed frame
    neighbor_cell: torch.Tensor  # (B, N, T) flat grid cell index
    neighbor_inside: torch.Tensor  # (B, N, T)
    crops: torch.Tensor  # (B, T, H, W) occupancy around the target per frame
    future: torch.Tensor  # (B, t_fut, 2) realized future (zeros when unknown)
    has_future: torch.Tensor  # (B,)
    episode_index: torch.Tensor  # (B,)
    target_ids: list

    def __len__(self):
        return self.obs.shape[0]

    @property
    def last_pos(self):
        return self.obs[:, -1]

    @property
    def last_disp(self):
        return self.obs[:, -1] - self.obs[:, -2] if self.obs.shape[1] > 1 else torch.zeros_like(self.obs[:, -1])

    def select(self, idx) -> "EpisodeBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = [v[i] for i in idx.tolist()] if isinstance(v, list) else v[idx]
        return EpisodeBatch(**kw)

    def to(self, dtype) -> "EpisodeBatch":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.to(dtype) if isinstance(v, torch.Tensor) and v.is_floating_point() else v
        return EpisodeBatch(**kw)


def _canonical_neighbors(target, others):
    """Neighbors ordered by a content key so any input permutation gives identical tensors."""
    last = target.observed[-1]
    return sorted(others, key=lambda a: (tuple((a.observed[-1] - last).tolist()), a.observed.tobytes()))


def make_batch(
    items: Sequence[tuple[TrajectoryEpisode, object]],
    scenes: SceneGrid | Mapping[str, SceneGrid],
    cfg: ModelConfig,
    episode_index: Sequence[int] | None = None,
    dtype=torch.float32,
) -> EpisodeBatch:
    """Precompute padded inputs for (episode, target_id) pairs."""
    H, W, cs = cfg.grid_len, cfg.grid_wid, cfg.graph_cell_size
    T = cfg.t_obs
    B = len(items)
    neighbor_lists = []
    for ep, tid in items:
        target = ep.agent(tid)
        neighbor_lists.append(_canonical_neighbors(target, [a for a in ep.agents if a.agent_id != tid]))
    N = max([len(n) for n in neighbor_lists], default=0)
    obs = np.zeros((B, T, 2))
    n_obs = np.zeros((B, N, T, 2))
    n_mask = np.zeros((B, N), dtype=bool)
    crops = np.zeros((B, T, H, W))
    future = np.zeros((B, cfg.t_fut, 2))
    has_future = np.zeros(B, dtype=bool)
    for b, ((ep, tid), neighbors) in enumerate(zip(items, neighbor_lists)):
        target = ep.agent(tid)
        obs[b] = target.observed
        scene = scenes if isinstance(scenes, SceneGrid) else scenes[ep.scene_id]
        crops[b] = scene_crops(scene, target.observed, (H, W), (cs, cs))
        for j, a in enumerate(neighbors):
            n_obs[b, j] = a.observed
            n_mask[b, j] = True
        if target.has_future:
            future[b] = target.future
            has_future[b] = True
    rel_t = n_obs - obs[:, None]
    row, col, inside = graph_cells(rel_t, H, W, cs)
    inside &= n_mask[..., None]
    cell = np.where(inside, row * W + col, 0)
    rel_last = rel_t[:, :, -1] * n_mask[..., None]
    if episode_index is None:
        episode_index = range(B)
    return EpisodeBatch(
        obs=torch.as_tensor(obs, dtype=dtype),
        neighbor_obs=torch.as_tensor(n_obs, dtype=dtype),
        neighbor_mask=torch.as_tensor(n_mask),
        neighbor_rel=torch.as_tensor(rel_last, dtype=dtype),
        neighbor_cell=torch.as_tensor(cell, dtype=torch.long),
        neighbor_inside=torch.as_tensor(inside),
        crops=torch.as_tensor(crops, dtype=dtype),
        future=torch.as_tensor(future, dtype=dtype),
        has_future=torch.as_tensor(has_future),
        episode_index=torch.as_tensor(list(episode_index), dtype=torch.long),
        target_ids=[tid for _, tid in items],
    )


def batch_from_episodes(episodes: Sequence[TrajectoryEpisode], scenes, cfg: ModelConfig, dtype=torch.float32):
    """One row per target agent across ``episodes``."""
    items, index = [], []
    for i, ep in enumerate(episodes):
        for agent in ep.targets():
            items.append((ep, agent.agent_id))
            index.append(i)
    return make_batch(items, scenes, cfg, index, dtype)


@dataclass
class Conditioning:
    cond: torch.Tensor
    social_weights: torch.Tensor
    physical_weights: torch.Tensor
    frames: torch.Tensor


class GeneratorSide(nn.Module):
    """Encoders producing the generator condition feature."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.social = SocialEncoder(cfg.social_hidden)
        self.physical = PhysicalEncoder(cfg.physical_hidden, cfg.physical_channels)
        self.social_att = SocialAttention(cfg.social_hidden, cfg.attention_dim)
        self.physical_att = PhysicalAttention(cfg.social_hidden, cfg.physical_channels, cfg.attention_dim)
        self.stg = STGraphEncoder(cfg.physical_channels + cfg.social_hidden, cfg.stg_hidden, cfg.stg_dim)

    def forward(self, batch: EpisodeBatch) -> Conditioning:
        cfg = self.cfg
        B, T = batch.obs.shape[:2]
        N = batch.neighbor_obs.shape[1]
        H, W = cfg.grid_len, cfg.grid_wid
        target_h = self.social(path_displacements(batch.obs))
        if N:
            nh = self.social(path_displacements(batch.neighbor_obs.flatten(0, 1))).view(B, N, -1)
            nh = nh * batch.neighbor_mask.unsqueeze(-1)
        else:
            nh = target_h.new_zeros(B, 0, cfg.social_hidden)
        w_soc, soc_summary = self.social_att(target_h, nh, batch.neighbor_rel, batch.neighbor_mask)
        phys = self.physical(batch.crops.flatten(0, 1)).view(B, T, cfg.physical_channels, H, W)
        w_phys, phys_summary = self.physical_att(target_h, phys[:, -1])
        social = pool_social(w_soc.unsqueeze(-1) * nh, batch.neighbor_cell, batch.neighbor_inside, (H, W))
        frames = torch.cat([phys, social], dim=2)
        stg = self.stg(frames)
        cond = build_condition(soc_summary, phys_summary, stg, (cfg.social_hidden, cfg.physical_channels, cfg.stg_dim))
        return Conditioning(cond, w_soc, w_phys, frames)


class MGModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = GeneratorSide(cfg)
        self.generators = GeneratorBank(cfg.n_G, cfg.d_c, cfg.noise_dim, cfg.decoder_hidden, cfg.t_fut, cfg.max_step)
        self.discriminator = Discriminator(cfg.n_G, cfg.disc_hidden)
        self.selector = Selector(cfg.d_c, cfg.selector_hidden, cfg.n_G)

    @classmethod
    def build(cls, cfg: ModelConfig, dtype=torch.float32) -> "MGModel":
        """Initialize parameters from ``cfg.seed`` without touching the global RNG."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            model = cls(cfg)
        return model.to(dtype)

    def checkpoint_modules(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "generators": self.generators,
            "discriminator": self.discriminator,
            "selector": self.selector,
        }

    def condition(self, batch: EpisodeBatch) -> torch.Tensor:
        return self.encoder(batch).cond

    def priors(self, cond: torch.Tensor):
        """(priors, active mask, renormalized priors), each (B, n_G)."""
        p = torch.softmax(self.selector(cond), dim=-1)
        mask, renorm = threshold_priors(p, self.cfg.activation_threshold)
        return p, mask, renorm

    def discriminate(self, batch: EpisodeBatch, traj):
        return self.discriminator(batch.obs, traj)

    @torch.no_grad()
    def sample(self, batch: EpisodeBatch, K: int, generator: torch.Generator):
        """K samples per row: (trajectories (B, K, t_fut, 2), generator indices (B, K), noise (B, K, nz))."""
        B = len(batch)
        cond = self.condition(batch)
        _, _, renorm = self.priors(cond)
        g_idx = torch.multinomial(renorm, K, replacement=True, generator=generator)
        z = torch.randn(B, K, self.cfg.noise_dim, generator=generator, dtype=cond.dtype)
        rep = lambda t: t.unsqueeze(1).expand(B, K, *t.shape[1:]).reshape(B * K, *t.shape[1:])  # noqa: E731
        traj = self.generators(g_idx.reshape(-1), rep(cond), z.reshape(B * K, -1), rep(batch.last_pos), rep(batch.last_disp))
        return traj.view(B, K, self.cfg.t_fut, 2), g_idx, z


def predict(model: MGModel, batch: EpisodeBatch, K: int, seed: int = 0) -> list[PredictionSet]:
    """PredictionSets (float64 coordinates) for every row of ``batch``."""
    gen = torch.Generator().manual_seed(int(seed))
    traj, g_idx, _ = model.sample(batch, K, gen)
    traj = traj.double().numpy()
    g_idx = g_idx.numpy()
    out = []
    for b in range(len(batch)):
        samples = tuple(
            PredictionSample(traj[b, k], int(g_idx[b, k]), (int(seed), b, k)) for k in range(K)
        )
        out.append(PredictionSet(batch.target_ids[b], samples))
    return out



def save_model(path, model: MGModel, extra: dict | None = None):
    save_checkpoint(path, model.checkpoint_modules(), model.cfg.to_dict(), extra)


def load_model(path, dtype=torch.float32) -> tuple[MGModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, extra)."""
    data = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(data["config"])
        model = MGModel.build(cfg, dtype)
        for name, module in model.checkpoint_modules().items():
            module.load_state_dict(data["blocks"][name])
    except (KeyError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not match the model layout ({exc})") from exc
    return model.to(dtype), data.get("extra", {})
