"""Core domain types shared across the package.

Positions are world meters throughout. Arrays held by these types are made
read-only on construction so instances can be shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Hashable

import numpy as np

WALKABLE = 0
OBSTACLE = 1


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def _as_path(values) -> np.ndarray:
    arr = _frozen_array(values)
    if arr.size == 0:
        arr = _frozen_array(np.zeros((0, 2)))
    return arr


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """One pedestrian: observed positions plus zero or more ground-truth futures.

    ``realized`` indexes the future that actually happened when several are
    annotated (synthetic multi-future data); real data carries one future.
    """

    agent_id: Hashable
    observed: np.ndarray
    futures: tuple[np.ndarray, ...] = ()
    realized: int = 0

    def __post_init__(self):
        object.__setattr__(self, "observed", _as_path(self.observed))
        object.__setattr__(self, "futures", tuple(_as_path(f) for f in self.futures))

    @property
    def has_future(self) -> bool:
        return len(self.futures) > 0

    @property
    def future(self) -> np.ndarray:
        """The realized ground-truth future."""
        return self.futures[self.realized]

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.realized == other.realized
            and _arrays_equal(self.observed, other.observed)
            and len(self.futures) == len(other.futures)
            and all(_arrays_equal(a, b) for a, b in zip(self.futures, other.futures))
        )


def _arrays_equal(a: np.ndarray, b: np.ndarray) -> bool:
    # bit-exact, NaN-aware
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class TrajectoryEpisode:
    agents: tuple[AgentTrack, ...]
    scene_id: str
    timestep_duration: float
    t_obs: int
    t_fut: int

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))

    @property
    def t_pred(self) -> int:
        return self.t_obs + self.t_fut

    def targets(self) -> list[AgentTrack]:
        """Agents that carry at least one ground-truth future."""
        return [a for a in self.agents if a.has_future]

    def agent(self, agent_id) -> AgentTrack:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(f"agent {agent_id!r} not in episode")

    def index_of(self, agent_id) -> int:
        for i, a in enumerate(self.agents):
            if a.agent_id == agent_id:
                return i
        raise KeyError(f"agent {agent_id!r} not in episode")


@dataclass(frozen=True)
class Violation:
    agent_id: Hashable | None
    field: str
    message: str

    def __str__(self):
        who = "episode" if self.agent_id is None else f"agent {self.agent_id!r}"
        return f"{who}: {self.field}: {self.message}"


def _path_violations(agent_id, name: str, path: np.ndarray, length: int) -> list[Violation]:
    out = []
    if path.ndim != 2 or path.shape[1] != 2:
        out.append(Violation(agent_id, name, f"expected shape ({length}, 2), got {path.shape}"))
        return out
    if path.shape[0] != length:
        out.append(Violation(agent_id, name, f"expected {length} positions, got {path.shape[0]}"))
    bad = np.flatnonzero(~np.isfinite(path).all(axis=1))
    for frame in bad:
        out.append(Violation(agent_id, name, f"non-finite coordinate at frame {int(frame)}"))
    return out


def validate_episode(ep: TrajectoryEpisode) -> list[Violation]:
    """Report every invariant violation in ``ep``; never raises."""
    out: list[Violation] = []
    if not (isinstance(ep.t_obs, int) and ep.t_obs >= 1):
        out.append(Violation(None, "t_obs", f"must be an integer >= 1, got {ep.t_obs!r}"))
    if not (isinstance(ep.t_fut, int) and ep.t_fut >= 1):
        out.append(Violation(None, "t_fut", f"must be an integer >= 1, got {ep.t_fut!r}"))
    if not (isinstance(ep.timestep_duration, (int, float)) and ep.timestep_duration > 0):
        out.append(Violation(None, "timestep_duration", "must be positive"))
    seen = set()
    for agent in ep.agents:
        if agent.agent_id in seen:
            out.append(Violation(agent.agent_id, "agent_id", "duplicate within episode"))
        seen.add(agent.agent_id)
        out.extend(_path_violations(agent.agent_id, "observed", agent.observed, ep.t_obs))
        for k, fut in enumerate(agent.futures):
            out.extend(_path_violations(agent.agent_id, f"futures[{k}]", fut, ep.t_fut))
        if agent.futures and not 0 <= agent.realized < len(agent.futures):
            out.append(Violation(agent.agent_id, "realized", "index out of range"))
    return out


@dataclass(frozen=True, eq=False)
class SceneGrid:
    """Binary semantic raster; ``cells[row, col]`` with rows along +y, cols along +x."""

    width: int
    height: int
    cell_size: float
    origin: tuple[float, float]
    cells: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("scene width and height must be >= 1")
        if not self.cell_size > 0:
            raise ValueError("scene cell_size must be > 0")
        cells = np.asarray(self.cells)
        if cells.size != self.width * self.height:
            raise ValueError(
                f"scene has {cells.size} cells, expected {self.width}x{self.height}"
            )
        if not np.isin(cells, (WALKABLE, OBSTACLE)).all():
            raise ValueError("scene cell values must be 0 (walkable) or 1 (obstacle)")
        object.__setattr__(self, "cells", _frozen_array(cells.reshape(self.height, self.width), np.uint8))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def uniform(cls, width, height, cell_size, origin=(0.0, 0.0), value=WALKABLE) -> "SceneGrid":
        return cls(width, height, cell_size, origin, np.full((height, width), value, dtype=np.uint8))

    def cell_index(self, points) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) integer indices of the cells containing ``points`` (may be out of range)."""
        pts = np.asarray(points, dtype=np.float64)
        col = np.floor((pts[..., 0] - self.origin[0]) / self.cell_size).astype(np.int64)
        row = np.floor((pts[..., 1] - self.origin[1]) / self.cell_size).astype(np.int64)
        return row, col

    def value_at(self, points) -> np.ndarray:
        """Cell values at ``points``; anything outside the grid is an obstacle."""
        row, col = self.cell_index(points)
        inside = (row >= 0) & (row < self.height) & (col >= 0) & (col < self.width)
        out = np.full(row.shape, OBSTACLE, dtype=np.uint8)
        out[inside] = self.cells[row[inside], col[inside]]
        return out

    def is_walkable(self, points) -> np.ndarray:
        return self.value_at(points) == WALKABLE

    def __eq__(self, other):
        if not isinstance(other, SceneGrid):
            return NotImplemented
        return (
            (self.width, self.height, self.cell_size, self.origin)
            == (other.width, other.height, other.cell_size, other.origin)
            and np.array_equal(self.cells, other.cells)
        )


@dataclass(frozen=True)
class PredictionSample:
    trajectory: np.ndarray
    generator_index: int
    noise_seed: object = None


@dataclass(frozen=True)
class PredictionSet:
    agent_id: Hashable
    samples: tuple[PredictionSample, ...]

    @property
    def K(self) -> int:
        return len(self.samples)

    def trajectories(self) -> np.ndarray:
        """Stacked (K, t_fut, 2) array."""
        if not self.samples:
            return np.zeros((0, 0, 2))
        return np.stack([s.trajectory for s in self.samples])

    def generator_indices(self) -> np.ndarray:
        return np.array([s.generator_index for s in self.samples], dtype=np.int64)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and objective hyperparameters.

    Generator indices are zero-based everywhere in the package.
    """

    n_G: int = 4
    noise_dim: int = 8
    t_obs: int = 8
    t_fut: int = 12
    grid_len: int = 7
    grid_wid: int = 7
    graph_cell_size: float = 1.0
    social_hidden: int = 16
    physical_hidden: int = 8
    physical_channels: int = 8
    attention_dim: int = 16
    stg_hidden: int = 8
    stg_dim: int = 16
    decoder_hidden: int = 32
    disc_hidden: int = 32
    selector_hidden: int = 32
    max_step: float = 2.5
    K: int = 20
    sigma: float = 1.0
    l_mc: int = 1
    lambda_variety: float = 1.0
    lambda_cls: float = 1.0
    activation_threshold: float = 0.03
    learning_rate: float = 0.0002
    seed: int = 0

    def __post_init__(self):
        ints = (
            "n_G", "noise_dim", "t_obs", "t_fut", "grid_len", "grid_wid", "social_hidden",
            "physical_hidden", "physical_channels", "attention_dim", "stg_hidden", "stg_dim",
            "decoder_hidden", "disc_hidden", "selector_hidden", "K", "l_mc",
        )
        for name in ints:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
        for name in ("graph_cell_size", "max_step", "sigma", "learning_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("lambda_variety", "lambda_cls"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.activation_threshold < 1:
            raise ValueError("activation_threshold must lie in [0, 1)")

    @property
    def d_c(self) -> int:
        """Condition feature width: social summary + physical summary + graph encoding."""
        return self.social_hidden + self.physical_channels + self.stg_dim

    @property
    def crop_extent(self) -> tuple[float, float]:
        """(x, y) metric extent of the target-centric grid."""
        return self.grid_wid * self.graph_cell_size, self.grid_len * self.graph_cell_size

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)


def displacements(path: np.ndarray) -> np.ndarray:
    """Per-step displacement vectors; the first step is zero so lengths match."""
    path = np.asarray(path, dtype=np.float64)
    out = np.zeros_like(path)
    if len(path) > 1:
        out[1:] = path[1:] - path[:-1]
    return out

