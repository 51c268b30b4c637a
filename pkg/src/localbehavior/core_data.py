"""Domain types for trajectories, scenes, lane maps, and experiment configs.

Coordinates are always stored in the global metric frame. Agent-centric
normalisation happens inside :mod:`localbehavior.model`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Literal, NamedTuple

import numpy as np

TRAJ_COLUMNS = ("scene_id", "region_id", "agent_id", "kind", "t_index", "x", "y")
MAP_COLUMNS = ("lane_id", "point_index", "x", "y", "successor_ids")


class DataError(ValueError):
    pass


class MalformedRow(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class LengthMismatch(DataError):
    def __init__(self, scene_id: str, agent_id: str, kind: str, got: int, want: int):
        super().__init__(f"scene {scene_id} agent {agent_id}: {got} {kind} points, expected {want}")
        self.scene_id = scene_id
        self.agent_id = agent_id


class IoFailure(OSError):
    pass


def fmt_float(v: float) -> str:
    # repr is the shortest string that round-trips a float64
    return repr(float(v))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    scene_id: str
    agent_id: str
    region_id: str
    points: np.ndarray
    sample_period: float
    kind: Literal["observed", "future"] = "observed"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
            raise DataError(f"trajectory {self.scene_id}/{self.agent_id}: points must be (n, 2)")
        if not np.all(np.isfinite(pts)):
            raise DataError(f"trajectory {self.scene_id}/{self.agent_id}: non-finite coordinate")
        if self.sample_period <= 0:
            raise DataError("sample_period must be positive")
        if self.kind not in ("observed", "future"):
            raise DataError(f"unknown trajectory kind {self.kind!r}")
        object.__setattr__(self, "points", _frozen(pts))

    @property
    def key(self) -> tuple[str, str]:
        return (self.scene_id, self.agent_id)

    def __len__(self) -> int:
        return len(self.points)

    def mean_speed(self) -> float:
        """Path length over total duration; 0 for single-point tracks."""
        if len(self.points) < 2:
            return 0.0
        seg = np.diff(self.points, axis=0)
        return float(np.hypot(seg[:, 0], seg[:, 1]).sum() / ((len(self.points) - 1) * self.sample_period))


def current_location(traj: Trajectory) -> tuple[float, float]:
    """Last observed point (the agent's location "now")."""
    if traj.kind != "observed":
        raise ValueError("current_location needs an observed trajectory")
    if len(traj.points) < 2:
        raise ValueError("degenerate observed trajectory (fewer than 2 points)")
    x, y = traj.points[-1]
    return (float(x), float(y))


def first_location(traj: Trajectory) -> tuple[float, float]:
    if len(traj.points) < 2:
        raise ValueError("degenerate trajectory (fewer than 2 points)")
    x, y = traj.points[0]
    return (float(x), float(y))


class Agent(NamedTuple):
    observed: Trajectory
    future: Trajectory

    @property
    def agent_id(self) -> str:
        return self.observed.agent_id


@dataclass(frozen=True)
class Scene:
    scene_id: str
    region_id: str
    agents: tuple[Agent, ...]
    target_agent_ids: tuple[str, ...]
    map_ref: str = ""

    def __post_init__(self):
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise DataError(f"scene {self.scene_id}: duplicate agent ids")
        missing = set(self.target_agent_ids) - set(ids)
        if missing:
            raise DataError(f"scene {self.scene_id}: unknown target ids {sorted(missing)}")

    def agent(self, agent_id: str) -> Agent:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)


@dataclass(frozen=True)
class SceneSet:
    scenes: tuple[Scene, ...]
    t_obs: int
    t_fut: int
    sample_period: float

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def by_id(self) -> dict[str, Scene]:
        return {s.scene_id: s for s in self.scenes}

    def observed(self) -> Iterable[Trajectory]:
        for s in self.scenes:
            for a in s.agents:
                yield a.observed

    def n_agents(self) -> int:
        return sum(len(s.agents) for s in self.scenes)


@dataclass(frozen=True)
class LaneSegment:
    lane_id: str
    polyline: np.ndarray
    successors: tuple[str, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.polyline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise DataError(f"lane {self.lane_id}: polyline needs >= 2 points")
        object.__setattr__(self, "polyline", _frozen(pts))
        object.__setattr__(self, "successors", tuple(self.successors))

    def length(self) -> float:
        d = np.diff(self.polyline, axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())


@dataclass(frozen=True)
class LaneMap:
    lanes: tuple[LaneSegment, ...]

    def __post_init__(self):
        ids = {ln.lane_id for ln in self.lanes}
        if len(ids) != len(self.lanes):
            raise DataError("duplicate lane ids")
        for ln in self.lanes:
            for s in ln.successors:
                if s not in ids:
                    raise DataError(f"lane {ln.lane_id}: dangling successor {s}")

    def by_id(self) -> dict[str, LaneSegment]:
        return {ln.lane_id: ln for ln in self.lanes}

    def segments(self) -> np.ndarray:
        """All consecutive point pairs as an (n, 2, 2) array, in lane order."""
        parts = [np.stack([ln.polyline[:-1], ln.polyline[1:]], axis=1) for ln in self.lanes]
        if not parts:
            return np.zeros((0, 2, 2))
        return np.concatenate(parts, axis=0)

    def segment_lane_index(self) -> np.ndarray:
        return np.concatenate(
            [np.full(len(ln.polyline) - 1, i) for i, ln in enumerate(self.lanes)]
        ) if self.lanes else np.zeros(0, dtype=int)


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment configuration; every field can be set from a config file."""

    T_obs: int = 5
    T_fut: int = 12
    sample_period: float = 0.5
    epsilon: float = 1.5
    n_modes: int = 6
    feature_dim: int = 64
    behavior_cap: int = 8
    lambda_kd: float = 1.5
    kd_sites: int = 2
    seed: int = 0
    # model / training knobs beyond the core set
    n_heads: int = 4
    n_rounds: int = 2
    m_est: int = 4
    map_radius: float = 25.0
    cell_size: float = 2.0
    epochs: int = 36
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay_epoch: int = 32
    lr_decay_to: float = 1e-4
    kd_norm: Literal["l2", "squared"] = "l2"
    use_estimator: bool = True
    pathway: Literal["graph", "raster"] = "graph"
    raster_size: int = 64
    raster_resolution: float = 0.5
    raster_patch: int = 8

    def __post_init__(self):
        for name in ("T_obs", "T_fut", "n_modes", "feature_dim", "behavior_cap", "n_heads",
                     "n_rounds", "m_est", "epochs", "batch_size", "raster_size", "raster_patch"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.T_obs < 2:
            raise ValueError("T_obs must be at least 2")
        for name in ("sample_period", "epsilon", "map_radius", "cell_size", "lr",
                     "raster_resolution", "lr_decay_to"):
            v = float(getattr(self, name))
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive")
        if not (self.lambda_kd >= 0 and math.isfinite(self.lambda_kd)):
            raise ValueError("lambda_kd must be >= 0")
        if self.kd_sites not in (1, 2):
            raise ValueError("kd_sites must be 1 or 2")
        if self.feature_dim % self.n_heads:
            raise ValueError("feature_dim must be divisible by n_heads")
        if self.kd_norm not in ("l2", "squared"):
            raise ValueError("kd_norm must be 'l2' or 'squared'")
        if self.pathway not in ("graph", "raster"):
            raise ValueError("pathway must be 'graph' or 'raster'")
        if self.raster_size % self.raster_patch:
            raise ValueError("raster_size must be a multiple of raster_patch")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            default = getattr(cls, k)
            if isinstance(default, bool):
                out[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                out[k] = int(v)
            elif isinstance(default, float):
                out[k] = float(v)
            else:
                out[k] = v
        return cls(**out)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(read_flat_config(path))

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def read_flat_config(path) -> dict:
    """JSON object, or ``key = value`` lines (``#`` starts a comment)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise MalformedRow(n, f"expected key = value, got {line!r}")
        k, v = (t.strip() for t in line.split(sep, 1))
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


# ---------------------------------------------------------------- CSV I/O


def load_scenes(path, t_obs: int = 5, t_fut: int = 12, sample_period: float = 0.5) -> SceneSet:
    """Read a trajectories CSV into a SceneSet.

    Every agent of every scene is marked as a target agent. Rows may appear
    in any order; points are placed by ``t_index``.
    """
    path = Path(path)
    raw: dict[str, dict] = {}
    order: list[str] = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRAJ_COLUMNS:
            raise MalformedRow(1, f"expected header {','.join(TRAJ_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(TRAJ_COLUMNS):
                raise MalformedRow(lineno, f"expected {len(TRAJ_COLUMNS)} fields, got {len(row)}")
            scene_id, region_id, agent_id, kind, t_s, x_s, y_s = row
            if kind not in ("obs", "fut"):
                raise MalformedRow(lineno, f"kind must be obs|fut, got {kind!r}")
            try:
                t = int(t_s)
                x = float(x_s)
                y = float(y_s)
            except ValueError as exc:
                raise MalformedRow(lineno, str(exc)) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise MalformedRow(lineno, "non-finite coordinate")
            if t < 0:
                raise MalformedRow(lineno, "negative t_index")
            sc = raw.get(scene_id)
            if sc is None:
                sc = raw[scene_id] = {"region": region_id, "agents": {}, "order": []}
                order.append(scene_id)
            elif sc["region"] != region_id:
                raise MalformedRow(lineno, f"scene {scene_id} spans regions")
            ag = sc["agents"].get(agent_id)
            if ag is None:
                ag = sc["agents"][agent_id] = {"obs": {}, "fut": {}}
                sc["order"].append(agent_id)
            if t in ag[kind]:
                raise MalformedRow(lineno, f"duplicate t_index {t}")
            ag[kind][t] = (x, y)

    scenes = []
    for scene_id in order:
        sc = raw[scene_id]
        agents = []
        for agent_id in sc["order"]:
            ag = sc["agents"][agent_id]
            trajs = []
            for kind, want, long_kind in (("obs", t_obs, "observed"), ("fut", t_fut, "future")):
                pts = ag[kind]
                if len(pts) != want or set(pts) != set(range(want)):
                    raise LengthMismatch(scene_id, agent_id, kind, len(pts), want)
                trajs.append(Trajectory(scene_id, agent_id, sc["region"],
                                        np.array([pts[i] for i in range(want)]),
                                        sample_period, long_kind))
            agents.append(Agent(*trajs))
        scenes.append(Scene(scene_id, sc["region"], tuple(agents),
                            tuple(a.agent_id for a in agents), map_ref=sc["region"]))
    return SceneSet(tuple(scenes), t_obs, t_fut, sample_period)


def save_scenes(scene_set: SceneSet, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJ_COLUMNS)
            for sc in scene_set.scenes:
                for ag in sc.agents:
                    for kind, traj in (("obs", ag.observed), ("fut", ag.future)):
                        for t, (x, y) in enumerate(traj.points):
                            w.writerow((sc.scene_id, sc.region_id, ag.agent_id, kind, t,
                                        fmt_float(x), fmt_float(y)))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def save_map(lane_map: LaneMap, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MAP_COLUMNS)
            for ln in lane_map.lanes:
                succ = ";".join(ln.successors)
                for i, (x, y) in enumerate(ln.polyline):
                    w.writerow((ln.lane_id, i, fmt_float(x), fmt_float(y), succ))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_map(path) -> LaneMap:
    lanes: dict[str, dict] = {}
    order = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MAP_COLUMNS:
            raise MalformedRow(1, f"expected header {','.join(MAP_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MAP_COLUMNS):
                raise MalformedRow(lineno, "wrong field count")
            lane_id, idx_s, x_s, y_s, succ = row
            try:
                idx, x, y = int(idx_s), float(x_s), float(y_s)
            except ValueError as exc:
                raise MalformedRow(lineno, str(exc)) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise MalformedRow(lineno, "non-finite coordinate")
            ln = lanes.get(lane_id)
            if ln is None:
                ln = lanes[lane_id] = {"pts": {}, "succ": tuple(s for s in succ.split(";") if s)}
                order.append(lane_id)
            ln["pts"][idx] = (x, y)
    out = []
    for lane_id in order:
        pts = lanes[lane_id]["pts"]
        out.append(LaneSegment(lane_id, np.array([pts[i] for i in sorted(pts)]),
                               lanes[lane_id]["succ"]))
    return LaneMap(tuple(out))


def scenes_equal(a: SceneSet, b: SceneSet, atol: float = 1e-9) -> bool:
    if (a.t_obs, a.t_fut, len(a)) != (b.t_obs, b.t_fut, len(b)):
        return False
    for sa, sb in zip(a.scenes, b.scenes):
        if (sa.scene_id, sa.region_id, len(sa.agents)) != (sb.scene_id, sb.region_id, len(sb.agents)):
            return False
        for aa, ab in zip(sa.agents, sb.agents):
            if aa.agent_id != ab.agent_id:
                return False
            for ta, tb in ((aa.observed, ab.observed), (aa.future, ab.future)):
                if ta.points.shape != tb.points.shape:
                    return False
                if not np.allclose(ta.points, tb.points, rtol=0, atol=atol):
                    return False
    return True
