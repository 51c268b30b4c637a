"""Per-region database of observed trajectories with epsilon-radius queries.

Trajectories are hashed into a uniform grid by their *first* point. A query
scans only the cells whose square intersects the query disk and applies the
strict ``distance < epsilon`` test, so results equal a brute-force scan.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .core_data import SceneSet, Trajectory, fmt_float


MIN_SPEED = 2.0  # m/s; trajectories strictly slower than this are dropped

_DB_COLUMNS = ("scene_id", "agent_id", "t_index", "x", "y")


class EmptyRegion(UserWarning):
    """A region produced no trajectories that pass the filters; the empty database is still valid."""


@dataclass(frozen=True)
class BehaviorSet:
    anchor: tuple[float, float]
    epsilon: float
    members: tuple[Trajectory, ...]
    distances: tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.members)

    def keys(self) -> list[tuple[str, str]]:
        return [m.key for m in self.members]


@dataclass
class BehaviorDatabase:
    region_id: str
    cell_size: float
    trajectories: list[Trajectory]
    t_obs: int
    sample_period: float
    index: dict[tuple[int, int], np.ndarray] = field(default_factory=dict, repr=False)
    _firsts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        self._firsts = (np.array([t.points[0] for t in self.trajectories])
                        if self.trajectories else np.zeros((0, 2)))
        self._firsts.setflags(write=False)
        cells: dict[tuple[int, int], list[int]] = {}
        for i, (x, y) in enumerate(self._firsts):
            cells.setdefault(self.cell_of(x, y), []).append(i)
        self.index = {c: np.array(ix, dtype=np.int64) for c, ix in cells.items()}

    @property
    def total_count(self) -> int:
        return len(self.trajectories)

    @property
    def first_points(self) -> np.ndarray:
        return self._firsts

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (math.floor(x / self.cell_size), math.floor(y / self.cell_size))


def passes_filters(traj: Trajectory, t_obs: int) -> bool:
    """Full length, finite, and mean speed not below 2 m/s."""
    if traj.kind != "observed" or len(traj.points) != t_obs:
        return False
    if not np.all(np.isfinite(traj.points)):
        return False
    return traj.mean_speed() >= MIN_SPEED


def build_database(scenes: SceneSet, region_id: str, cell_size: float = 2.0) -> BehaviorDatabase:
    kept = [t for t in scenes.observed()
            if t.region_id == region_id and passes_filters(t, scenes.t_obs)]
    kept.sort(key=lambda t: t.key)
    if not kept:
        warnings.warn(f"behavior database for region {region_id} is empty", EmptyRegion, stacklevel=2)
    return BehaviorDatabase(region_id, cell_size, kept, scenes.t_obs, scenes.sample_period)


def _ordered(db: BehaviorDatabase, anchor, eps, idx: np.ndarray, d: np.ndarray) -> BehaviorSet:
    pairs = sorted(zip(d.tolist(), idx.tolist()), key=lambda p: (p[0], db.trajectories[p[1]].key))
    return BehaviorSet(anchor, eps, tuple(db.trajectories[i] for _, i in pairs),
                       tuple(dd for dd, _ in pairs))


def _dist(points: np.ndarray, x: float, y: float) -> np.ndarray:
    return np.hypot(points[:, 0] - x, points[:, 1] - y)


def query_local_behavior(db: BehaviorDatabase, location, epsilon: float,
                         exclude: Iterable[tuple[str, str]] = ()) -> BehaviorSet:
    """Stored trajectories whose first point is strictly closer than ``epsilon``."""
    x, y = float(location[0]), float(location[1])
    anchor = (x, y)
    if db.total_count == 0 or epsilon <= 0:
        return BehaviorSet(anchor, epsilon, ())
    c = db.cell_size
    # pad the scanned window so float rounding in the cell arithmetic never drops a hit
    r = epsilon + 1e-9 * (1.0 + abs(x) + abs(y))
    cx0, cx1 = math.floor((x - r) / c), math.floor((x + r) / c)
    cy0, cy1 = math.floor((y - r) / c), math.floor((y + r) / c)
    hits = []
    for cx in range(cx0, cx1 + 1):
        # nearest point of the cell square to the query, along x
        dx = max(cx * c - x, 0.0, x - (cx + 1) * c)
        for cy in range(cy0, cy1 + 1):
            ix = db.index.get((cx, cy))
            if ix is None:
                continue
            dy = max(cy * c - y, 0.0, y - (cy + 1) * c)
            if dx * dx + dy * dy > r * r:
                continue
            hits.append(ix)
    if not hits:
        return BehaviorSet(anchor, epsilon, ())
    idx = np.concatenate(hits) if len(hits) > 1 else hits[0]
    d = _dist(db.first_points[idx], x, y)
    keep = d < epsilon
    idx, d = idx[keep], d[keep]
    exclude = set(exclude)
    if exclude and len(idx):
        ok = np.array([db.trajectories[i].key not in exclude for i in idx], dtype=bool)
        idx, d = idx[ok], d[ok]
    return _ordered(db, anchor, epsilon, idx, d)


def linear_scan(db: BehaviorDatabase, location, epsilon: float,
                exclude: Iterable[tuple[str, str]] = ()) -> BehaviorSet:
    """Brute-force reference query over every stored trajectory."""
    x, y = float(location[0]), float(location[1])
    if db.total_count == 0:
        return BehaviorSet((x, y), epsilon, ())
    d = _dist(db.first_points, x, y)
    idx = np.nonzero(d < epsilon)[0]
    exclude = set(exclude)
    if exclude:
        idx = np.array([i for i in idx if db.trajectories[i].key not in exclude], dtype=np.int64)
    return _ordered(db, (x, y), epsilon, idx, d[idx])


def subsample(bs: BehaviorSet, cap: int) -> BehaviorSet:
    if cap < 0:
        raise ValueError("cap must be >= 0")
    return BehaviorSet(bs.anchor, bs.epsilon, bs.members[:cap], bs.distances[:cap])


def db_stats(db: BehaviorDatabase) -> dict:
    hist: dict[tuple[int, int], int] = {c: len(ix) for c, ix in sorted(db.index.items())}
    speeds = [t.mean_speed() for t in db.trajectories]
    return {
        "region_id": db.region_id,
        "count": db.total_count,
        "mean_speed": float(np.mean(speeds)) if speeds else 0.0,
        "n_cells": len(hist),
        "cell_histogram": hist,
    }


# ---------------------------------------------------------------- snapshot


def save_database(db: BehaviorDatabase, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# region_id={db.region_id} cell_size={fmt_float(db.cell_size)} "
                 f"t_obs={db.t_obs} sample_period={fmt_float(db.sample_period)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_DB_COLUMNS)
        for t in db.trajectories:
            for i, (x, y) in enumerate(t.points):
                w.writerow((t.scene_id, t.agent_id, i, fmt_float(x), fmt_float(y)))


def load_database(path) -> BehaviorDatabase:
    with open(Path(path), newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing database preamble")
        meta = dict(kv.split("=", 1) for kv in first[1:].split())
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != _DB_COLUMNS:
            raise ValueError(f"{path}: bad header")
        rows: dict[tuple[str, str], list] = {}
        for row in reader:
            if row:
                rows.setdefault((row[0], row[1]), []).append((int(row[2]), float(row[3]), float(row[4])))
    region = meta["region_id"]
    period = float(meta["sample_period"])
    trajs = []
    for (scene_id, agent_id), pts in rows.items():
        pts.sort()
        trajs.append(Trajectory(scene_id, agent_id, region,
                                np.array([(x, y) for _, x, y in pts]), period, "observed"))
    trajs.sort(key=lambda t: t.key)
    return BehaviorDatabase(region, float(meta["cell_size"]), trajs, int(meta["t_obs"]), period)
