"""Target-centric fused spatiotemporal graphs and their convolutional-recurrent encoder.

Each observed frame becomes a ``grid_len x grid_wid`` grid centered on the
target (world-aligned axes). A cell carries the physical feature of the scene
under it plus the attention-scaled social encodings of the neighbors standing
in it at that frame.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from mgtraj.datamodel import SceneGrid, TrajectoryEpisode
from mgtraj.encoders import PhysicalEncoder, scene_crops


def graph_cells(rel, grid_len: int, grid_wid: int, cell_size: float):
    """Cell (row, col) of displacements ``rel`` from the target, and an inside mask.

    Rows follow +y and columns +x; the target itself lands in the center cell.
    """
    rel = np.asarray(rel, dtype=np.float64)
    col = np.floor(rel[..., 0] / cell_size + grid_wid / 2).astype(np.int64)
    row = np.floor(rel[..., 1] / cell_size + grid_len / 2).astype(np.int64)
    inside = (row >= 0) & (row < grid_len) & (col >= 0) & (col < grid_wid)
    return row, col, inside


def pool_social(weighted: torch.Tensor, flat_cell: torch.Tensor, inside: torch.Tensor, grid_shape) -> torch.Tensor:
    """Sum-pool neighbor vectors into grid cells per frame.

    weighted (B, N, D) attention-scaled encodings; flat_cell/inside (B, N, T)
    -> (B, T, D, H, W).
    """
    B, N, D = weighted.shape
    T = flat_cell.shape[-1]
    H, W = grid_shape
    out = weighted.new_zeros(B * T * H * W, D)
    b_idx, n_idx, t_idx = torch.nonzero(inside, as_tuple=True)
    if len(b_idx):
        dest = (b_idx * T + t_idx) * (H * W) + flat_cell[b_idx, n_idx, t_idx]
        out = out.index_add(0, dest, weighted[b_idx, n_idx])
    return out.view(B, T, H, W, D).permute(0, 1, 4, 2, 3)


def build_graph_sequence(
    ep: TrajectoryEpisode,
    target_id,
    soc_encodings: torch.Tensor,
    social_weights,
    scene: SceneGrid,
    physical: PhysicalEncoder,
    grid_len: int = 7,
    grid_wid: int = 7,
    cell_size: float = 1.0,
) -> torch.Tensor:
    """Fused graph frames for one target: (t_obs, d_p + d_s, grid_len, grid_wid).

    ``soc_encodings`` follows the episode's agent order; ``social_weights``
    follows the same order with the target removed.
    """
    t_idx = ep.index_of(target_id)
    target = ep.agents[t_idx]
    n_idx = [i for i in range(len(ep.agents)) if i != t_idx]
    dtype = soc_encodings.dtype
    crops = scene_crops(scene, target.observed, (grid_len, grid_wid), (cell_size, cell_size))
    with torch.no_grad():
        phys = physical(torch.as_tensor(crops, dtype=dtype))  # (T, d_p, H, W)
        T = ep.t_obs
        d_s = soc_encodings.shape[1]
        if n_idx:
            rel = np.stack([ep.agents[i].observed - target.observed for i in n_idx])  # (N, T, 2)
            row, col, inside = graph_cells(rel, grid_len, grid_wid, cell_size)
            flat = torch.as_tensor(np.where(inside, row * grid_wid + col, 0))[None]
            w = torch.as_tensor(np.asarray(social_weights), dtype=dtype)
            weighted = (w[:, None] * soc_encodings[n_idx])[None]
            social = pool_social(weighted, flat, torch.as_tensor(inside)[None], (grid_len, grid_wid))[0]
        else:
            social = soc_encodings.new_zeros(T, d_s, grid_len, grid_wid)
    return torch.cat([phys, social], dim=1)


class ConvGRUCell(nn.Module):
    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.hidden = hidden
        pad = kernel // 2
        self.gates = nn.Conv2d(in_channels + hidden, 2 * hidden, kernel, padding=pad)
        self.cand = nn.Conv2d(in_channels + hidden, hidden, kernel, padding=pad)

    def forward(self, x, h):
        r, z = torch.sigmoid(self.gates(torch.cat([x, h], dim=1))).chunk(2, dim=1)
        n = torch.tanh(self.cand(torch.cat([x, r * h], dim=1)))
        return (1 - z) * n + z * h


class STGraphEncoder(nn.Module):
    """One ConvGRU layer over the frame sequence, spatial mean pooling, linear projection."""

    def __init__(self, in_channels: int, hidden: int, out_dim: int):
        super().__init__()
        self.in_channels = in_channels
        self.cell = ConvGRUCell(in_channels, hidden)
        self.proj = nn.Linear(hidden, out_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """frames (B, T, C, H, W) -> (B, out_dim)."""
        B, T, C, H, W = frames.shape
        if C != self.in_channels:
            raise ValueError(f"frames have {C} channels, encoder expects {self.in_channels}")
        h = frames.new_zeros(B, self.cell.hidden, H, W)
        for t in range(T):
            h = self.cell(frames[:, t], h)
        return self.proj(F.adaptive_avg_pool2d(h, 1).flatten(1))


def encode_graph_sequence(encoder: STGraphEncoder, frames) -> torch.Tensor:
    """Encode one target's frame list/tensor (T, C, H, W) to a (d_stg,) vector."""
    if isinstance(frames, (list, tuple)):
        if not frames:
            raise ValueError("empty frame sequence")
        shapes = {tuple(f.shape) for f in frames}
        if len(shapes) != 1:
            raise ValueError(f"frames differ in shape: {sorted(shapes)}")
        frames = torch.stack(list(frames))
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise ValueError("expected a nonempty (T, C, H, W) frame sequence")
    return encoder(frames.unsqueeze(0))[0]
