"""Generator bank, discriminator with generator-classifier head, and checkpoint container."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from mgtraj.encoders import SocialEncoder, path_displacements


class TrajectoryDecoder(nn.Module):
    """GRU decoder emitting bounded per-step displacements.

    The hidden state starts from a linear map of (condition, noise); the first
    recurrent input is the last observed displacement.
    """

    def __init__(self, cond_dim: int, noise_dim: int, hidden: int, t_fut: int, max_step: float):
        super().__init__()
        self.t_fut = t_fut
        self.max_step = max_step
        self.init = nn.Linear(cond_dim + noise_dim, hidden)
        self.embed = nn.Linear(2, hidden)
        self.cell = nn.GRUCell(hidden, hidden)
        self.out = nn.Linear(hidden, 2)

    def steps(self, cond, z, last_disp):
        h = torch.tanh(self.init(torch.cat([cond, z], dim=-1)))
        d = last_disp
        out = []
        for _ in range(self.t_fut):
            h = self.cell(F.gelu(self.embed(d)), h)
            d = self.max_step * torch.tanh(self.out(h))
            out.append(d)
        return torch.stack(out, dim=1)

    def forward(self, cond, z, last_pos, last_disp):
        return last_pos.unsqueeze(1) + torch.cumsum(self.steps(cond, z, last_disp), dim=1)


class GeneratorBank(nn.Module):
    """``n_G`` decoders with disjoint parameters behind one batched call."""

    def __init__(self, n_G: int, cond_dim: int, noise_dim: int, hidden: int, t_fut: int, max_step: float):
        super().__init__()
        self.n_G = n_G
        self.noise_dim = noise_dim
        self.t_fut = t_fut
        self.decoders = nn.ModuleList(
            TrajectoryDecoder(cond_dim, noise_dim, hidden, t_fut, max_step) for _ in range(n_G)
        )

    def check_index(self, g: int):
        if not (isinstance(g, (int, np.integer)) and 0 <= g < self.n_G):
            raise IndexError(f"generator index {g!r} outside [0, {self.n_G})")

    def generate(self, g: int, cond, z, last_pos, last_disp):
        """Trajectories of generator ``g`` for batched (cond, z)."""
        self.check_index(g)
        return self.decoders[g](cond, z, last_pos, last_disp)

    def forward(self, g_idx: torch.Tensor, cond, z, last_pos, last_disp):
        """Row ``i`` is produced by generator ``g_idx[i]``; only used generators run."""
        out = cond.new_zeros(cond.shape[0], self.t_fut, 2)
        for g in torch.unique(g_idx).tolist():
            rows = torch.nonzero(g_idx == g, as_tuple=True)[0]
            out = out.index_copy(0, rows, self.generate(g, cond[rows], z[rows], last_pos[rows], last_disp[rows]))
        return out


@dataclass
class DiscriminatorOutput:
    realness_logit: torch.Tensor
    class_logits: torch.Tensor

    @property
    def realness(self) -> torch.Tensor:
        return torch.sigmoid(self.realness_logit)


class Discriminator(nn.Module):
    """Scores full (observed + candidate future) paths.

    Its feature ``C^dis`` comes from a private social encoder run over the
    path's displacements, so nothing is shared with the generator side.
    """

    def __init__(self, n_G: int, hidden: int):
        super().__init__()
        self.encoder = SocialEncoder(hidden)
        self.feature = nn.Sequential(nn.Linear(hidden, hidden), nn.GELU())
        self.real_head = nn.Linear(hidden, 1)
        self.cls_head = nn.Sequential(nn.Linear(hidden, hidden), nn.GELU(), nn.Linear(hidden, n_G))

    def features(self, observed, traj):
        return self.feature(self.encoder(path_displacements(torch.cat([observed, traj], dim=1))))

    def forward(self, observed, traj) -> DiscriminatorOutput:
        c = self.features(observed, traj)
        return DiscriminatorOutput(self.real_head(c).squeeze(-1), self.cls_head(c))


def sample_noise(count: int, noise_dim: int, seed=None, generator: torch.Generator | None = None, dtype=None):
    """(count, noise_dim) i.i.d. standard normal; reproducible from ``seed`` or ``generator``."""
    if count < 1 or noise_dim < 1:
        raise ValueError("count and noise_dim must be >= 1")
    if generator is None:
        generator = torch.Generator().manual_seed(int(seed or 0))
    return torch.randn(count, noise_dim, generator=generator, dtype=dtype or torch.get_default_dtype())


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MGTRAJ\x00\x01"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, modules: dict[str, nn.Module], config: dict, extra: dict | None = None):
    """Write ``modules``' parameter blocks keyed by (module, block) plus the config."""
    blocks = {
        name: {k: v.detach().cpu().clone() for k, v in mod.state_dict().items()} for name, mod in modules.items()
    }
    buf = io.BytesIO()
    torch.save({"config": config, "blocks": blocks, "extra": extra or {}}, buf)
    Path(path).write_bytes(MAGIC + struct.pack("<I", VERSION) + buf.getvalue())


def read_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic header)")
    (version,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        return torch.load(io.BytesIO(data[len(MAGIC) + 4 :]), weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: corrupt payload ({exc})") from exc
