"""Synthetic grid-of-intersections worlds with per-intersection turn priors.

Each intersection owns a probability vector over (left, straight, right). The
vector is never visible in the lane geometry, so only historical behavior at
that location reveals it. Traffic is right-hand; headings are indexed
0=E, 1=N, 2=W, 3=S.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .behavior_db import BehaviorDatabase, build_database
from .core_data import Agent, LaneMap, LaneSegment, Scene, SceneSet, Trajectory, read_flat_config

HEADINGS = np.array([(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)])
TURNS = ("left", "straight", "right")
SPLITS = ("train", "val", "test")


def _turn_heading(d: int, turn: int) -> int:
    # turn index: 0 left (ccw), 1 straight, 2 right (cw)
    return (d + (1, 0, 3)[turn]) % 4


@dataclass(frozen=True)
class WorldSpec:
    grid_n: int = 3
    lane_spacing: float = 40.0
    lane_offset: float = 1.75
    box_half: float = 6.0
    lane_piece: float = 7.0
    turn_priors: tuple | None = None
    prior_dominance: tuple[float, float] = (0.75, 0.95)
    speed_range: tuple[float, float] = (2.5, 8.0)
    lateral_noise_sd: float = 0.15
    n_scenes: tuple[int, int, int] = (2000, 400, 400)
    agents_per_scene: tuple[int, int] = (2, 8)
    traffic_skew: float = 1.0
    spawn_window: tuple[float, float] | None = None
    T_obs: int = 5
    T_fut: int = 12
    sample_period: float = 0.5
    world_id: str = "world0"
    seed: int = 0

    def __post_init__(self):
        if self.grid_n < 1:
            raise ValueError("grid_n must be >= 1")
        if self.lane_spacing <= 2 * self.box_half:
            raise ValueError("lane_spacing must exceed the intersection box")
        lo, hi = self.speed_range
        if lo < 2.5 or hi < lo:
            raise ValueError("speed_range must satisfy 2.5 <= min <= max")
        if self.lateral_noise_sd < 0:
            raise ValueError("lateral_noise_sd must be >= 0")
        a, b = self.agents_per_scene
        if a < 1 or b < a:
            raise ValueError("agents_per_scene must satisfy 1 <= min <= max")
        if self.turn_priors is not None:
            pri = np.asarray(self.turn_priors, dtype=float)
            if pri.shape != (self.grid_n ** 2, 3):
                raise ValueError("turn_priors must have one 3-vector per intersection")
            if np.any(pri < 0) or np.any(np.abs(pri.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError("turn priors must be non-negative and sum to 1")
            object.__setattr__(self, "turn_priors", tuple(tuple(float(v) for v in p) for p in pri))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        for k in ("prior_dominance", "speed_range", "n_scenes", "agents_per_scene", "spawn_window"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        if d.get("turn_priors") is not None:
            d["turn_priors"] = tuple(tuple(p) for p in d["turn_priors"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "WorldSpec":
        return cls.from_dict(read_flat_config(path))


@dataclass(frozen=True)
class World:
    world_id: str
    lane_map: LaneMap
    turn_priors: np.ndarray  # (grid_n**2, 3); evaluation only
    intersections: np.ndarray  # (grid_n**2, 2) centres
    traffic_weights: np.ndarray
    grid_n: int

    def intersection_index(self, i: int, j: int) -> int:
        return i * self.grid_n + j


def expected_lane_count(grid_n: int) -> int:
    """12 connectors per intersection + 4 inbound lanes each + 4 outbound stubs per side."""
    return 16 * grid_n * grid_n + 4 * grid_n


def _resample_line(a, b, piece: float) -> np.ndarray:
    n = max(1, int(np.ceil(np.hypot(*(np.asarray(b) - a)) / piece)))
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return (1 - t) * np.asarray(a) + t * np.asarray(b)


def _bezier(p0, c, p2, n: int = 4) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * c + t ** 2 * p2


def generate_world(spec: WorldSpec, seed: int | None = None) -> World:
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    n, S, off, box = spec.grid_n, spec.lane_spacing, spec.lane_offset, spec.box_half
    centers = np.array([(i * S, j * S) for i in range(n) for j in range(n)], dtype=float)

    if spec.turn_priors is not None:
        priors = np.array(spec.turn_priors, dtype=float)
    else:
        priors = np.zeros((n * n, 3))
        lo, hi = spec.prior_dominance
        for k in range(n * n):
            dom = rng.integers(3)
            p = rng.uniform(lo, hi)
            split = rng.uniform()
            rest = [t for t in range(3) if t != dom]
            priors[k, dom] = p
            priors[k, rest[0]] = (1 - p) * split
            priors[k, rest[1]] = (1 - p) * (1 - split)
    weights = rng.lognormal(0.0, spec.traffic_skew, size=n * n) if spec.traffic_skew > 0 else np.ones(n * n)
    weights = weights / weights.sum()

    def right(d):
        h = HEADINGS[d]
        return np.array([h[1], -h[0]])

    def entry(i, j, d):
        return centers[i * n + j] - box * HEADINGS[d] + off * right(d)

    def exit_(i, j, d):
        return centers[i * n + j] + box * HEADINGS[d] + off * right(d)

    def neighbor(i, j, d):
        di, dj = (int(HEADINGS[d][0]), int(HEADINGS[d][1]))
        a, b = i + di, j + dj
        return (a, b) if 0 <= a < n and 0 <= b < n else None

    lanes: list[LaneSegment] = []
    stub = S - 2 * box
    for i in range(n):
        for j in range(n):
            for d in range(4):
                # lane arriving at (i, j) heading d
                prev = neighbor(i, j, (d + 2) % 4)
                end = entry(i, j, d)
                start = exit_(*prev, d) if prev is not None else end - stub * HEADINGS[d]
                succ = tuple(f"cx_{i}_{j}_{d}_{t}" for t in range(3))
                lanes.append(LaneSegment(f"in_{i}_{j}_{d}", _resample_line(start, end, spec.lane_piece), succ))
    for i in range(n):
        for j in range(n):
            for d in range(4):
                for t in range(3):
                    d2 = _turn_heading(d, t)
                    p0, p2 = entry(i, j, d), exit_(i, j, d2)
                    nxt = neighbor(i, j, d2)
                    out_id = f"in_{nxt[0]}_{nxt[1]}_{d2}" if nxt is not None else f"out_{i}_{j}_{d2}"
                    if t == 1:
                        pts = _resample_line(p0, p2, spec.lane_piece)
                    else:
                        # corner of the two lane lines as Bezier control point
                        h0 = HEADINGS[d]
                        ctrl = p0 + h0 * np.dot(p2 - p0, h0)
                        pts = _bezier(p0, ctrl, p2, 4)
                    lanes.append(LaneSegment(f"cx_{i}_{j}_{d}_{t}", pts, (out_id,)))
    for i in range(n):
        for j in range(n):
            for d in range(4):
                if neighbor(i, j, d) is None:
                    a = exit_(i, j, d)
                    lanes.append(LaneSegment(f"out_{i}_{j}_{d}",
                                             _resample_line(a, a + stub * HEADINGS[d], spec.lane_piece), ()))
    return World(spec.world_id, LaneMap(tuple(lanes)), priors, centers, weights, n)


# ---------------------------------------------------------------- simulation


class _Path:
    """Arc-length parameterised polyline with straight extrapolation past its end."""

    def __init__(self, pts: np.ndarray):
        keep = np.concatenate([[True], np.any(np.diff(pts, axis=0) != 0, axis=1)])
        self.pts = pts[keep]
        seg = np.diff(self.pts, axis=0)
        self.seglen = np.hypot(seg[:, 0], seg[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seglen)])
        self.dirs = seg / self.seglen[:, None]

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def at(self, s: np.ndarray):
        k = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seglen) - 1)
        pos = self.pts[k] + (s - self.cum[k])[:, None] * self.dirs[k]
        return pos, self.dirs[k]


def _agent_path(world: World, lane_ids: dict, start_lane: str, s0: float, need: float, rng):
    """Walk lanes from ``start_lane`` sampling turns; returns (path, s0, turns taken)."""
    lanes = lane_ids
    pts = [lanes[start_lane].polyline]
    length = lanes[start_lane].length() - s0
    cur = start_lane
    turns = []
    while length < need + 1.0:
        ln = lanes[cur]
        if not ln.successors:
            break
        if cur.startswith("in_"):
            _, i, j, d = cur.split("_")
            k = world.intersection_index(int(i), int(j))
            t = int(rng.choice(3, p=world.turn_priors[k]))
            turns.append((k, t))
            cur = f"cx_{i}_{j}_{d}_{t}"
        else:
            cur = ln.successors[0]
        pts.append(lanes[cur].polyline[1:])
        length += lanes[cur].length()
    return _Path(np.concatenate(pts, axis=0)), turns


def simulate_agent(world: World, spec: WorldSpec, rng, center: int | None = None,
                   lane_index: dict | None = None):
    """One agent's (T_obs + T_fut, 2) positions and the turns it sampled."""
    lanes = lane_index or world.lane_map.by_id()
    n = world.grid_n
    if center is None:
        center = int(rng.choice(n * n, p=world.traffic_weights))
    i, j = divmod(center, n)
    d = int(rng.integers(4))
    lane = lanes[f"in_{i}_{j}_{d}"]
    L = lane.length()
    if spec.spawn_window is not None:
        lo, hi = spec.spawn_window
        s0 = L - rng.uniform(lo, hi)
    else:
        s0 = rng.uniform(0.0, L)
    s0 = float(np.clip(s0, 0.0, L))
    speed = rng.uniform(*spec.speed_range)
    T = spec.T_obs + spec.T_fut
    span = speed * (T - 1) * spec.sample_period
    path, turns = _agent_path(world, lanes, lane.lane_id, s0, span, rng)
    s = s0 + speed * spec.sample_period * np.arange(T)
    pos, tangent = path.at(s)
    if spec.lateral_noise_sd > 0:
        normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
        pos = pos + normal * rng.normal(0.0, spec.lateral_noise_sd, size=(T, 1))
    return pos, turns, speed


def _scene_seed(seed: int, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(SPLITS.index(split) + 1, index))


def simulate_agents(world: World, spec: WorldSpec, split: str, seed: int | None = None,
                    n_scenes: int | None = None) -> SceneSet:
    seed = spec.seed if seed is None else seed
    if n_scenes is None:
        n_scenes = spec.n_scenes[SPLITS.index(split)]
    lanes = world.lane_map.by_id()
    scenes = []
    lo, hi = spec.agents_per_scene
    for idx in range(n_scenes):
        rng = np.random.default_rng(_scene_seed(seed, split, idx))
        center = int(rng.choice(world.grid_n ** 2, p=world.traffic_weights))
        scene_id = f"{split}_{idx:05d}"
        agents = []
        for a in range(int(rng.integers(lo, hi + 1))):
            pos, _, _ = simulate_agent(world, spec, rng, center=center, lane_index=lanes)
            agent_id = f"a{a}"
            obs = Trajectory(scene_id, agent_id, world.world_id, pos[:spec.T_obs], spec.sample_period, "observed")
            fut = Trajectory(scene_id, agent_id, world.world_id, pos[spec.T_obs:], spec.sample_period, "future")
            agents.append(Agent(obs, fut))
        scenes.append(Scene(scene_id, world.world_id, tuple(agents),
                            tuple(ag.agent_id for ag in agents), map_ref=world.world_id))
    scenes.sort(key=lambda s: s.scene_id)
    return SceneSet(tuple(scenes), spec.T_obs, spec.T_fut, spec.sample_period)


@dataclass
class Benchmark:
    world: World
    spec: WorldSpec
    splits: dict[str, SceneSet] = field(default_factory=dict)
    dbs: dict[str, BehaviorDatabase] = field(default_factory=dict)


def make_benchmark(spec: WorldSpec, cell_size: float = 2.0) -> Benchmark:
    world = generate_world(spec)
    bench = Benchmark(world, spec)
    for split in SPLITS:
        ss = simulate_agents(world, spec, split)
        bench.splits[split] = ss
        bench.dbs[split] = build_database(ss, world.world_id, cell_size)
    return bench


def world_record(world: World, spec: WorldSpec) -> dict:
    return {
        "world_id": world.world_id,
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "turn_priors": world.turn_priors.tolist(),
        "traffic_weights": world.traffic_weights.tolist(),
        "intersections": world.intersections.tolist(),
    }


def with_seed(spec: WorldSpec, seed: int) -> WorldSpec:
    return replace(spec, seed=seed)


def classify_turn(points: np.ndarray, threshold_deg: float = 30.0) -> int | None:
    """Net heading change between first and last displacement -> turn index or None."""
    d = np.diff(np.asarray(points), axis=0)
    a, b = d[0], d[-1]
    if not (np.any(a) and np.any(b)):
        return None
    ang = np.degrees(np.arctan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1]))
    if ang > threshold_deg:
        return 0
    if ang < -threshold_deg:
        return 2
    return 1


def save_world(world: World, spec: WorldSpec, path) -> None:
    Path(path).write_text(json.dumps(world_record(world, spec), indent=2, sort_keys=True))
