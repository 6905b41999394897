"""Social and physical encoders, attention, and the generator condition feature."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from mgtraj.datamodel import SceneGrid, TrajectoryEpisode, displacements


class SocialEncoder(nn.Module):
    """GRU over per-step displacements; one hidden vector per track.

    Working on displacements rather than positions makes the encoding
    translation invariant.
    """

    def __init__(self, hidden: int, embed: int | None = None):
        super().__init__()
        embed = embed or hidden
        self.hidden = hidden
        self.embed = nn.Linear(2, embed)
        self.cell = nn.GRUCell(embed, hidden)

    def forward(self, disp: torch.Tensor) -> torch.Tensor:
        """disp: (N, T, 2) displacements -> (N, hidden)."""
        h = disp.new_zeros(disp.shape[0], self.hidden)
        for t in range(disp.shape[1]):
            h = self.cell(F.gelu(self.embed(disp[:, t])), h)
        return h


def path_displacements(paths: torch.Tensor) -> torch.Tensor:
    """(..., T, 2) positions -> displacements with a zero first step."""
    d = torch.zeros_like(paths)
    d[..., 1:, :] = paths[..., 1:, :] - paths[..., :-1, :]
    return d


class PhysicalEncoder(nn.Module):
    """Three 3x3 convolutions over an occupancy crop (1 = obstacle)."""

    def __init__(self, hidden: int, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(1, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv3 = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        """crops: (N, H, W) occupancy -> (N, channels, H, W)."""
        x = crops.unsqueeze(1) * 2.0 - 1.0
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return self.conv3(x)


def crop_offsets(shape: tuple[int, int], spacing: tuple[float, float]) -> np.ndarray:
    """(H, W, 2) offsets of cell centers from the crop center; row index runs along +y."""
    h, w = shape
    sx, sy = spacing
    cols = (np.arange(w) - (w - 1) / 2) * sx
    rows = (np.arange(h) - (h - 1) / 2) * sy
    ox, oy = np.meshgrid(cols, rows)
    return np.stack([ox, oy], axis=-1)


def scene_crops(scene: SceneGrid, centers, shape: tuple[int, int], spacing: tuple[float, float]) -> np.ndarray:
    """Sample ``scene`` on a grid of cell centers around each of ``centers``.

    Returns (N, H, W) occupancy; samples outside the raster are obstacles.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    offsets = crop_offsets(shape, spacing)
    pts = centers[:, None, None, :] + offsets[None]
    return scene.value_at(pts).astype(np.float64)


class DotAttention(nn.Module):
    """Scaled dot-product attention of one query over a padded key set."""

    def __init__(self, query_dim: int, key_dim: int, att_dim: int):
        super().__init__()
        self.q = nn.Linear(query_dim, att_dim)
        # a key bias would shift every score equally and cancel in the softmax
        self.k = nn.Linear(key_dim, att_dim, bias=False)
        self.scale = 1.0 / math.sqrt(att_dim)

    def forward(self, query, keys, mask=None):
        """query (B, Dq), keys (B, N, Dk), mask (B, N) bool -> weights (B, N).

        Rows with no valid key get all-zero weights.
        """
        scores = torch.einsum("bd,bnd->bn", self.q(query), self.k(keys)) * self.scale
        if mask is None:
            return torch.softmax(scores, dim=-1)
        scores = scores.masked_fill(~mask, float("-inf"))
        any_valid = mask.any(dim=-1, keepdim=True)
        scores = torch.where(any_valid, scores, torch.zeros_like(scores))
        return torch.softmax(scores, dim=-1) * mask


class SocialAttention(DotAttention):
    """Query: the target's social encoding. Keys: neighbor encoding plus relative position."""

    def __init__(self, social_dim: int, att_dim: int):
        super().__init__(social_dim, social_dim + 2, att_dim)

    def forward(self, target_h, neighbor_h, rel_pos, mask):
        weights = super().forward(target_h, torch.cat([neighbor_h, rel_pos], dim=-1), mask)
        summary = torch.einsum("bn,bnd->bd", weights, neighbor_h)
        return weights, summary


class PhysicalAttention(DotAttention):
    """Query: the target's social encoding. Keys and values: feature-map cells."""

    def __init__(self, social_dim: int, channels: int, att_dim: int):
        super().__init__(social_dim, channels, att_dim)

    def forward(self, target_h, feature_map):
        cells = feature_map.flatten(2).transpose(1, 2)  # (B, H*W, C)
        weights = super().forward(target_h, cells)
        summary = torch.einsum("bn,bnd->bd", weights, cells)
        return weights, summary


@dataclass
class AttentionWeights:
    social: np.ndarray
    physical: np.ndarray


class ConditionError(ValueError):
    pass


def build_condition(soc_summary, phys_summary, stg_encoding, dims: tuple[int, int, int] | None = None) -> torch.Tensor:
    """Ordered concatenation [social, physical, spatiotemporal] along the last axis."""
    parts = {"social": soc_summary, "physical": phys_summary, "spatiotemporal": stg_encoding}
    parts = {k: torch.as_tensor(v) for k, v in parts.items()}
    if dims is not None:
        for (name, value), want in zip(parts.items(), dims):
            if value.shape[-1] != want:
                raise ConditionError(f"{name} segment has width {value.shape[-1]}, expected {want}")
    return torch.cat(list(parts.values()), dim=-1)


# ---------------------------------------------------------------------------
# single-instance helpers over the module API


@torch.no_grad()
def encode_social(encoder: SocialEncoder, ep: TrajectoryEpisode) -> torch.Tensor:
    """(n_agents, d_s) encodings in the episode's agent order.

    Agents are encoded one at a time so a row never depends on its position
    in a BLAS batch; reordering agents permutes the rows bit for bit.
    """
    p = next(encoder.parameters())
    if not ep.agents:
        return torch.zeros(0, encoder.hidden, dtype=p.dtype)
    rows = [encoder(torch.as_tensor(displacements(a.observed), dtype=p.dtype)[None]) for a in ep.agents]
    return torch.cat(rows)


@torch.no_grad()
def encode_physical(
    encoder: PhysicalEncoder, scene: SceneGrid, center, crop_extent, shape: tuple[int, int] = (7, 7)
) -> torch.Tensor:
    """(H, W, d_p) feature map of the crop of ``crop_extent`` meters around ``center``."""
    if np.isscalar(crop_extent):
        crop_extent = (crop_extent, crop_extent)
    if min(crop_extent) <= 0:
        raise ValueError("crop_extent must be > 0")
    spacing = (crop_extent[0] / shape[1], crop_extent[1] / shape[0])
    crop = scene_crops(scene, center, shape, spacing)
    p = next(encoder.parameters())
    fmap = encoder(torch.as_tensor(crop, dtype=p.dtype))
    return fmap[0].permute(1, 2, 0)


@torch.no_grad()
def attend(
    social_att: SocialAttention,
    physical_att: PhysicalAttention,
    ep: TrajectoryEpisode,
    target_id,
    socials: torch.Tensor,
    physical: torch.Tensor,
):
    """Attention of ``target_id`` over its neighbors and over the (H, W, d_p) physical map.

    Returns (AttentionWeights, soc_summary, phys_summary); social weights follow
    the episode's agent order with the target removed.
    """
    t_idx = ep.index_of(target_id)
    target_h = socials[t_idx : t_idx + 1]
    n_idx = [i for i in range(len(ep.agents)) if i != t_idx]
    d_s = socials.shape[1]
    if n_idx:
        last = ep.agents[t_idx].observed[-1]
        rel = np.stack([ep.agents[i].observed[-1] - last for i in n_idx])
        neighbor_h = socials[n_idx].unsqueeze(0)
        rel_t = torch.as_tensor(rel, dtype=socials.dtype).unsqueeze(0)
        mask = torch.ones(1, len(n_idx), dtype=torch.bool)
        w_soc, soc_summary = social_att(target_h, neighbor_h, rel_t, mask)
        w_soc = w_soc[0].numpy()
    else:
        w_soc = np.zeros(0)
        soc_summary = socials.new_zeros(1, d_s)
    fmap = physical.permute(2, 0, 1).unsqueeze(0)
    w_phys, phys_summary = physical_att(target_h, fmap)
    weights = AttentionWeights(w_soc, w_phys[0].numpy().reshape(physical.shape[0], physical.shape[1]))
    return weights, soc_summary[0], phys_summary[0]
