"""Trajectory file loading, sliding-window episode extraction and synthetic intersections."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from mgtraj.datamodel import OBSTACLE, WALKABLE, AgentTrack, SceneGrid, TrajectoryEpisode

log = logging.getLogger(__name__)

TRACKS_FILE = "tracks.txt"
SCENE_FILE = "scene.txt"
META_FILE = "meta.txt"


class TrackFormatError(ValueError):
    """Malformed trajectory or scene file; ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int | None = None, path=None):
        where = f"{path}:" if path is not None else ""
        where += f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + message)
        self.lineno = lineno


class SpecError(ValueError):
    """Invalid synthetic dataset specification; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ---------------------------------------------------------------------------
# raw track tables


@dataclass(frozen=True)
class TrackFormat:
    """How to read a whitespace/tab separated track file.

    ``columns`` gives the position of frame, agent id, x and y within a record;
    ``scale`` converts file units to meters.
    """

    columns: tuple[int, int, int, int] = (0, 1, 2, 3)
    delimiter: str | None = None
    scale: float = 1.0


@dataclass(frozen=True, eq=False)
class RawTrackTable:
    frames: np.ndarray
    agent_ids: tuple
    xy: np.ndarray
    frame_stride: int = 1

    def __len__(self):
        return len(self.frames)

    @property
    def n_agents(self) -> int:
        return len(set(self.agent_ids))

    def rows(self) -> list[tuple[int, Hashable, float, float]]:
        return [
            (int(f), a, float(x), float(y))
            for f, a, (x, y) in zip(self.frames, self.agent_ids, self.xy)
        ]

    def tracks(self) -> dict[Hashable, tuple[np.ndarray, np.ndarray]]:
        """agent_id -> (frames, positions), frames ascending."""
        groups: dict = defaultdict(list)
        for i, a in enumerate(self.agent_ids):
            groups[a].append(i)
        return {a: (self.frames[idx], self.xy[idx]) for a, idx in groups.items()}

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[int, Hashable, float, float]], frame_stride=None):
        rows = sorted(rows, key=lambda r: (_id_key(r[1]), r[0]))
        frames = np.array([r[0] for r in rows], dtype=np.int64)
        ids = tuple(r[1] for r in rows)
        xy = np.array([[r[2], r[3]] for r in rows], dtype=np.float64).reshape(-1, 2)
        if frame_stride is None:
            frame_stride = _infer_stride(frames, ids)
        return cls(frames, ids, xy, frame_stride)


def _id_key(agent_id):
    # ints before strings, each in natural order
    return (0, agent_id, "") if isinstance(agent_id, int) else (1, 0, str(agent_id))


def _infer_stride(frames: np.ndarray, ids: tuple) -> int:
    diffs = Counter()
    for k in range(1, len(frames)):
        if ids[k] == ids[k - 1]:
            d = int(frames[k] - frames[k - 1])
            if d > 0:
                diffs[d] += 1
    if not diffs:
        return 1
    best = max(diffs.values())
    return min(d for d, c in diffs.items() if c == best)


def _parse_id(token: str):
    try:
        value = float(token)
    except ValueError:
        return token
    if value.is_integer():
        return int(value)
    return token


def _parse_frame(token: str) -> int:
    value = float(token)
    if not value.is_integer():
        raise ValueError(f"frame {token!r} is not an integer")
    return int(value)


def load_track_table(path, fmt: TrackFormat | None = None) -> RawTrackTable:
    """Parse a ``frame agent_id x y`` file into a sorted, validated table.

    An agent whose frames go backwards in file order is split into a new track
    (id suffixed ``#n``) and a warning is logged.
    """
    fmt = fmt or TrackFormat()
    path = Path(path)
    rows = []
    seen: dict[tuple, int] = {}
    last_frame: dict = {}
    split_count: Counter = Counter()
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split(fmt.delimiter) if fmt.delimiter else stripped.split()
            parts = [p for p in parts if p != ""]
            if len(parts) <= max(fmt.columns):
                raise TrackFormatError(f"expected at least {max(fmt.columns) + 1} fields, got {len(parts)}", lineno, path)
            ci_f, ci_a, ci_x, ci_y = fmt.columns
            try:
                frame = _parse_frame(parts[ci_f])
                x = float(parts[ci_x]) * fmt.scale
                y = float(parts[ci_y]) * fmt.scale
            except ValueError as exc:
                raise TrackFormatError(str(exc), lineno, path) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise TrackFormatError("non-finite coordinate", lineno, path)
            raw_id = _parse_id(parts[ci_a])
            if (frame, raw_id) in seen:
                raise TrackFormatError(
                    f"duplicate record for frame {frame}, agent {raw_id} (first at line {seen[frame, raw_id]})",
                    lineno,
                    path,
                )
            seen[frame, raw_id] = lineno
            prev = last_frame.get(raw_id)
            if prev is not None and frame < prev:
                split_count[raw_id] += 1
                log.warning("%s:%d: frames of agent %s go backwards; splitting track", path, lineno, raw_id)
            last_frame[raw_id] = frame
            agent_id = raw_id if split_count[raw_id] == 0 else f"{raw_id}#{split_count[raw_id]}"
            rows.append((frame, agent_id, x, y))
    return RawTrackTable.from_rows(rows)


def write_track_table(path, rows: Sequence[tuple[int, Hashable, float, float]]):
    with Path(path).open("w") as fh:
        for frame, agent_id, x, y in rows:
            fh.write(f"{int(frame)}\t{agent_id}\t{float(x)!r}\t{float(y)!r}\n")


def _contiguous_segments(frames: np.ndarray, stride: int) -> list[slice]:
    if len(frames) == 0:
        return []
    breaks = np.flatnonzero(np.diff(frames) != stride) + 1
    bounds = [0, *breaks.tolist(), len(frames)]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def window_episodes(
    table: RawTrackTable,
    t_obs: int,
    t_fut: int,
    scene: SceneGrid | None = None,
    scene_id: str = "scene",
    timestep_duration: float = 0.4,
) -> list[TrajectoryEpisode]:
    """Slide a ``t_obs + t_fut`` window over every contiguous track segment.

    Each window start that fully covers at least one agent yields one episode;
    fully covered agents are targets with a single future, agents covering
    only the observation frames ride along as neighbors.
    """
    if t_obs < 1 or t_fut < 1 or t_obs + t_fut < 2:
        raise ValueError("need t_obs >= 1, t_fut >= 1")
    stride = table.frame_stride
    total = t_obs + t_fut
    # agent -> frame -> position, restricted to contiguous coverage lookups
    coverage: dict[int, list] = defaultdict(list)  # window start -> [(agent, positions, full)]
    for agent_id, (frames, xy) in table.tracks().items():
        for seg in _contiguous_segments(frames, stride):
            f_seg, p_seg = frames[seg], xy[seg]
            n = len(f_seg)
            for k in range(0, n - t_obs + 1):
                full = k + total <= n
                coverage[int(f_seg[k])].append((agent_id, p_seg[k : k + (total if full else t_obs)], full))
    episodes = []
    for start in sorted(coverage):
        entries = coverage[start]
        if not any(full for _, _, full in entries):
            continue
        agents = []
        for agent_id, pos, full in sorted(entries, key=lambda e: _id_key(e[0])):
            if full:
                agents.append(AgentTrack(agent_id, pos[:t_obs], (pos[t_obs:],)))
            else:
                agents.append(AgentTrack(agent_id, pos))
        episodes.append(TrajectoryEpisode(tuple(agents), scene_id, timestep_duration, t_obs, t_fut))
    return episodes


# ---------------------------------------------------------------------------
# scene files


def write_scene(path, scene: SceneGrid):
    with Path(path).open("w") as fh:
        fh.write(f"{scene.width} {scene.height} {scene.cell_size!r} {scene.origin[0]!r} {scene.origin[1]!r}\n")
        for row in scene.cells:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load_scene(path) -> SceneGrid:
    path = Path(path)
    tokens = path.read_text().split("\n", 1)
    header = tokens[0].split()
    if len(header) != 5:
        raise TrackFormatError("scene header needs 'width height cell_size origin_x origin_y'", 1, path)
    try:
        width, height = int(header[0]), int(header[1])
        cell_size, ox, oy = (float(v) for v in header[2:])
    except ValueError as exc:
        raise TrackFormatError(str(exc), 1, path) from None
    body = tokens[1].split() if len(tokens) > 1 else []
    if len(body) != width * height:
        raise TrackFormatError(f"expected {width * height} cell values, got {len(body)}", None, path)
    try:
        cells = np.array([int(v) for v in body], dtype=np.int64)
        return SceneGrid(width, height, cell_size, (ox, oy), cells)
    except ValueError as exc:
        raise TrackFormatError(str(exc), None, path) from None


def open_scene_for(points: np.ndarray, cell_size: float = 0.5, margin: float = 5.0) -> SceneGrid:
    """All-walkable scene covering ``points`` (used when a dataset ships no raster)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return SceneGrid.uniform(1, 1, cell_size)
    lo = np.floor((pts.min(axis=0) - margin) / cell_size) * cell_size
    hi = pts.max(axis=0) + margin
    w, h = np.ceil((hi - lo) / cell_size).astype(int)
    return SceneGrid.uniform(int(w), int(h), cell_size, (float(lo[0]), float(lo[1])))


# ---------------------------------------------------------------------------
# key-value metadata


def write_metadata(path, meta: dict):
    with Path(path).open("w") as fh:
        for key, value in meta.items():
            fh.write(f"{key} = {json.dumps(value)}\n")


def read_metadata(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise TrackFormatError("expected 'key = value'", lineno, path)
        key, value = line.split("=", 1)
        try:
            out[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError:
            out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# episode serialization


def episode_to_dict(ep: TrajectoryEpisode) -> dict:
    return {
        "scene_id": ep.scene_id,
        "timestep_duration": ep.timestep_duration,
        "t_obs": ep.t_obs,
        "t_fut": ep.t_fut,
        "agents": [
            {
                "agent_id": a.agent_id,
                "observed": a.observed.tolist(),
                "futures": [f.tolist() for f in a.futures],
                "realized": a.realized,
            }
            for a in ep.agents
        ],
    }


def episode_from_dict(data: dict) -> TrajectoryEpisode:
    agents = tuple(
        AgentTrack(
            a["agent_id"],
            np.array(a["observed"], dtype=np.float64).reshape(-1, 2),
            tuple(np.array(f, dtype=np.float64).reshape(-1, 2) for f in a["futures"]),
            a.get("realized", 0),
        )
        for a in data["agents"]
    )
    return TrajectoryEpisode(agents, data["scene_id"], data["timestep_duration"], data["t_obs"], data["t_fut"])


def dumps_episodes(episodes: Sequence[TrajectoryEpisode]) -> str:
    return json.dumps([episode_to_dict(ep) for ep in episodes])


def loads_episodes(text: str) -> list[TrajectoryEpisode]:
    return [episode_from_dict(d) for d in json.loads(text)]


# ---------------------------------------------------------------------------
# synthetic intersections

# unit vectors; incoming agents always walk north toward the junction
_INCOMING = (0.0, 1.0)
_BRANCHES = {
    "t_junction": ((-1.0, 0.0), (1.0, 0.0)),
    "crossroad": ((-1.0, 0.0), (0.0, 1.0), (1.0, 0.0)),
}


@dataclass(frozen=True)
class SynthSpec:
    layout: str = "t_junction"
    corridor_width: float = 2.0
    arm_length: float = 12.0
    speed_mean: float = 1.3
    speed_std: float = 0.1
    branch_probs: tuple[float, ...] = (0.5, 0.5)
    n_agents: int = 200
    noise_std: float = 0.03
    seed: int = 0
    t_obs: int = 8
    t_fut: int = 12
    timestep_duration: float = 0.4
    cell_size: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "branch_probs", tuple(float(p) for p in self.branch_probs))

    @property
    def n_branches(self) -> int:
        return len(_BRANCHES[self.layout])

    def validate(self):
        if self.layout not in _BRANCHES:
            raise SpecError("layout", f"must be one of {sorted(_BRANCHES)}, got {self.layout!r}")
        if len(self.branch_probs) != self.n_branches:
            raise SpecError(
                "branch_probs", f"{self.layout} needs {self.n_branches} probabilities, got {len(self.branch_probs)}"
            )
        if any(p < 0 for p in self.branch_probs) or abs(sum(self.branch_probs) - 1.0) > 1e-9:
            raise SpecError("branch_probs", "must be nonnegative and sum to 1")
        for name in ("corridor_width", "arm_length", "speed_mean", "timestep_duration", "cell_size"):
            if not getattr(self, name) > 0:
                raise SpecError(name, "must be > 0")
        for name in ("speed_std", "noise_std"):
            if not getattr(self, name) >= 0:
                raise SpecError(name, "must be >= 0")
        for name in ("n_agents", "t_obs", "t_fut"):
            if not getattr(self, name) >= 1:
                raise SpecError(name, "must be >= 1")
        if 3 * self.noise_std >= self.corridor_width / 4:
            raise SpecError("noise_std", "jitter too large for the corridor width")
        step = self.speed_mean * self.timestep_duration
        if self._max_fit_speed() < self.speed_mean:
            need = (self.t_obs + self.t_fut + 1) * step
            raise SpecError(
                "arm_length",
                f"arms of {self.arm_length} m cannot hold {self.t_obs}+{self.t_fut} steps of {step:.3f} m (need ~{need:.2f} m)",
            )

    def _max_fit_speed(self) -> float:
        # the last observed point sits up to 2 steps before the junction center;
        # both observation (t_obs - 1 + 2 steps) and future (t_fut steps) must fit an arm
        margin = self.cell_size
        steps = max(self.t_obs + 1, self.t_fut)
        return (self.arm_length - margin) / (steps * self.timestep_duration)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_probs"] = list(self.branch_probs)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(sorted(unknown)[0], "unknown field")
        return cls(**data)


def _corridor_rects(spec: SynthSpec) -> list[tuple[float, float, float, float]]:
    """Axis-aligned walkable rectangles (xmin, xmax, ymin, ymax) around the origin junction."""
    h = spec.corridor_width / 2
    L = spec.arm_length
    rects = [(-h, h, -h, h)]
    for dx, dy in ((-_INCOMING[0], -_INCOMING[1]), *_BRANCHES[spec.layout]):
        if dx == 0:
            rects.append((-h, h, min(0.0, dy * L), max(0.0, dy * L)))
        else:
            rects.append((min(0.0, dx * L), max(0.0, dx * L), -h, h))
    return rects


def synth_scene(spec: SynthSpec) -> SceneGrid:
    """Raster marking every cell that overlaps a corridor as walkable."""
    cs = spec.cell_size
    half = math.ceil((spec.arm_length + 1.0) / cs)
    n = 2 * half
    origin = (-half * cs, -half * cs)
    edges = origin[0] + cs * np.arange(n)
    cells = np.full((n, n), OBSTACLE, dtype=np.uint8)
    for xmin, xmax, ymin, ymax in _corridor_rects(spec):
        cols = (edges < xmax) & (edges + cs > xmin)
        rows = (edges < ymax) & (edges + cs > ymin)
        cells[np.ix_(rows, cols)] = WALKABLE
    return SceneGrid(n, n, cs, origin, cells)


def _path_points(s: np.ndarray, branch: tuple[float, float]) -> np.ndarray:
    """Positions at signed arc length ``s`` (negative: incoming arm; positive: along ``branch``)."""
    s = np.asarray(s, dtype=np.float64)
    before = np.minimum(s, 0.0)[:, None] * np.array(_INCOMING)
    after = np.maximum(s, 0.0)[:, None] * np.array(branch)
    return before + after


def synthesize(spec: SynthSpec) -> tuple[list[TrajectoryEpisode], SceneGrid]:
    """Simulate single-pedestrian episodes at a junction with one future per branch.

    Agents walk north at constant speed, the observation ends shortly before
    the junction center, and each stored future continues into one outgoing
    arm. ``AgentTrack.realized`` names the branch drawn from ``branch_probs``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    branches = _BRANCHES[spec.layout]
    dt = spec.timestep_duration
    v_lo = max(0.25 * spec.speed_mean, spec.speed_mean - 3 * spec.speed_std)
    v_hi = min(spec.speed_mean + 3 * spec.speed_std, spec.speed_mean * 2, spec._max_fit_speed())
    jitter_cap = 3 * spec.noise_std
    scene = synth_scene(spec)
    probs = np.array(spec.branch_probs)
    probs = probs / probs.sum()
    episodes = []
    for i in range(spec.n_agents):
        speed = float(np.clip(rng.normal(spec.speed_mean, spec.speed_std), v_lo, v_hi))
        step = speed * dt
        s_last = -rng.uniform(0.5, 2.0) * step
        s_obs = s_last - step * np.arange(spec.t_obs - 1, -1, -1)
        s_fut = s_last + step * np.arange(1, spec.t_fut + 1)
        realized = int(rng.choice(len(branches), p=probs))
        observed = _path_points(s_obs, branches[0]) + np.clip(
            rng.normal(0, spec.noise_std, (spec.t_obs, 2)), -jitter_cap, jitter_cap
        )
        futures = tuple(
            _path_points(s_fut, b)
            + np.clip(rng.normal(0, spec.noise_std, (spec.t_fut, 2)), -jitter_cap, jitter_cap)
            for b in branches
        )
        agent = AgentTrack(i, observed, futures, realized)
        episodes.append(TrajectoryEpisode((agent,), spec.layout, dt, spec.t_obs, spec.t_fut))
    return episodes, scene


def branch_endpoint_regions(spec: SynthSpec) -> list[np.ndarray]:
    """Corner points of each branch's reachable endpoint region (for disconnectedness checks)."""
    dt = spec.timestep_duration
    v_lo = max(0.25 * spec.speed_mean, spec.speed_mean - 3 * spec.speed_std)
    v_hi = min(spec.speed_mean + 3 * spec.speed_std, spec.speed_mean * 2, spec._max_fit_speed())
    s_min = v_lo * dt * (spec.t_fut - 2.0)
    s_max = v_hi * dt * (spec.t_fut - 0.5)
    jit = 3 * spec.noise_std
    out = []
    for b in _BRANCHES[spec.layout]:
        ends = _path_points(np.array([s_min, s_max]), b)
        corners = [e + np.array([sx, sy]) * jit for e in ends for sx in (-1, 1) for sy in (-1, 1)]
        out.append(np.array(corners))
    return out


def synthetic_rows(episodes: Sequence[TrajectoryEpisode]) -> list[tuple[int, Hashable, float, float]]:
    """Realized paths as track rows; episodes are laid end-to-end in time so no two overlap."""
    rows = []
    frame = 0
    for ep in episodes:
        for agent in ep.targets():
            path = np.concatenate([agent.observed, agent.future])
            for k, (x, y) in enumerate(path):
                rows.append((frame + k, agent.agent_id, float(x), float(y)))
        frame += ep.t_pred
    return rows


def dump_synthetic(out_dir, spec: SynthSpec, episodes=None, scene=None) -> list[Path]:
    """Write tracks, scene raster and the metadata sidecar; returns the written paths."""
    if episodes is None or scene is None:
        episodes, scene = synthesize(spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / TRACKS_FILE, out_dir / SCENE_FILE, out_dir / META_FILE]
    write_track_table(paths[0], synthetic_rows(episodes))
    write_scene(paths[1], scene)
    write_metadata(paths[2], {"kind": "synthetic", **spec.to_dict()})
    return paths


@dataclass
class Dataset:
    episodes: list[TrajectoryEpisode]
    scene: SceneGrid
    synth: SynthSpec | None = None
    meta: dict = field(default_factory=dict)


def load_dataset(data_dir, t_obs: int = 8, t_fut: int = 12, fmt: TrackFormat | None = None) -> Dataset:
    """Load a data directory written by :func:`dump_synthetic` or holding a real track file.

    Synthetic directories are regenerated from their metadata so that every
    episode regains its full multi-future ground truth.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    meta_path = data_dir / META_FILE
    if meta_path.exists():
        meta = read_metadata(meta_path)
        if meta.get("kind") == "synthetic":
            spec = SynthSpec.from_dict({k: v for k, v in meta.items() if k != "kind"})
            episodes, scene = synthesize(spec)
            return Dataset(episodes, scene, spec, meta)
    else:
        meta = {}
    track_path = data_dir / TRACKS_FILE
    if not track_path.exists():
        candidates = sorted(p for p in data_dir.glob("*.txt") if p.name not in (SCENE_FILE, META_FILE))
        if not candidates:
            raise FileNotFoundError(f"no track file in {data_dir}")
        track_path = candidates[0]
    table = load_track_table(track_path, fmt)
    scene_path = data_dir / SCENE_FILE
    scene = load_scene(scene_path) if scene_path.exists() else open_scene_for(table.xy)
    scene_id = meta.get("scene_id", data_dir.name)
    dt = float(meta.get("timestep_duration", 0.4))
    episodes = window_episodes(table, t_obs, t_fut, scene, scene_id, dt)
    return Dataset(episodes, scene, None, meta)
