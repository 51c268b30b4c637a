"""Agent-centric scene graphs and padded batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..behavior_db import BehaviorDatabase, BehaviorSet, query_local_behavior, subsample
from ..core_data import ExperimentConfig, LaneMap, Scene, SceneSet, current_location

MAP_DIM = 5  # midpoint (2), unit direction (2), length (1)


def agent_dim(t_obs: int) -> int:
    return 2 * (t_obs - 1) + 2


def behavior_dim(t_obs: int) -> int:
    # displacements, first-point offset from anchor, anchor position
    return 2 * (t_obs - 1) + 4


def frame_of(observed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Origin = current location; rotation maps the last displacement onto +x."""
    origin = observed[-1].copy()
    d = observed[-1] - observed[-2]
    n = np.hypot(d[0], d[1])
    if n == 0.0:
        c, s = 1.0, 0.0
    else:
        c, s = d[0] / n, d[1] / n
    rot = np.array([[c, s], [-s, c]])
    return origin, rot


def to_local(points: np.ndarray, origin: np.ndarray, rot: np.ndarray) -> np.ndarray:
    return (points - origin) @ rot.T


def to_global(points: np.ndarray, origin: np.ndarray, rot: np.ndarray) -> np.ndarray:
    return points @ rot + origin


@dataclass
class SceneGraph:
    scene_id: str
    target_id: str
    target_index: int
    origin: np.ndarray
    rot: np.ndarray
    map_attrs: np.ndarray
    agent_attrs: np.ndarray
    behavior_attrs: np.ndarray
    behavior_anchor: np.ndarray
    behavior_sizes: np.ndarray  # raw N_B per agent before the cap
    gt_future: np.ndarray | None = None  # global frame

    @property
    def n_nodes(self) -> int:
        return len(self.map_attrs) + len(self.agent_attrs) + len(self.behavior_attrs)

    def edge_mask(self) -> np.ndarray:
        """Boolean adjacency over [map | agents | behaviors].

        The base graph is complete; every node (behavior nodes included) is
        connected to every behavior node.
        """
        n = self.n_nodes
        return np.ones((n, n), dtype=bool)

    @property
    def target_size(self) -> int:
        return int(self.behavior_sizes[self.target_index])


@dataclass
class MapIndex:
    """Lane-segment attributes in the global frame, for radius selection."""

    mid: np.ndarray
    vec: np.ndarray
    length: np.ndarray

    @classmethod
    def from_lane_map(cls, lane_map: LaneMap) -> "MapIndex":
        seg = lane_map.segments()
        vec = seg[:, 1] - seg[:, 0]
        return cls(seg.mean(axis=1), vec, np.hypot(vec[:, 0], vec[:, 1]))


def build_scene_graph(scene: Scene, target_id: str, behavior_sets: dict[str, BehaviorSet] | None,
                      map_index: MapIndex, cfg: ExperimentConfig) -> SceneGraph:
    agents = scene.agents
    ids = [a.agent_id for a in agents]
    ti = ids.index(target_id)
    tobs = agents[ti].observed.points
    origin, rot = frame_of(tobs)

    rel = map_index.mid - origin
    sel = np.nonzero(np.hypot(rel[:, 0], rel[:, 1]) < cfg.map_radius)[0]
    mid = to_local(map_index.mid[sel], origin, rot)
    dirs = (map_index.vec[sel] / np.where(map_index.length[sel] > 0, map_index.length[sel], 1.0)[:, None]) @ rot.T
    map_attrs = np.concatenate([mid, dirs, map_index.length[sel, None]], axis=1) if len(sel) else np.zeros((0, MAP_DIM))

    T = cfg.T_obs
    agent_attrs = np.zeros((len(agents), agent_dim(T)))
    cur_local = np.zeros((len(agents), 2))
    for k, ag in enumerate(agents):
        pts = to_local(ag.observed.points, origin, rot)
        cur_local[k] = pts[-1]
        agent_attrs[k, :-2] = np.diff(pts, axis=0).ravel()
        agent_attrs[k, -2:] = pts[-1]

    rows, anchors = [], []
    sizes = np.zeros(len(agents), dtype=np.int64)
    if behavior_sets is not None:
        for k, ag in enumerate(agents):
            bs = behavior_sets.get(ag.agent_id)
            if bs is None:
                continue
            sizes[k] = len(bs)
            for traj in subsample(bs, cfg.behavior_cap).members:
                pts = to_local(traj.points, origin, rot)
                row = np.empty(behavior_dim(T))
                row[:-4] = np.diff(pts, axis=0).ravel()
                row[-4:-2] = pts[0] - cur_local[k]
                row[-2:] = cur_local[k]
                rows.append(row)
                anchors.append(k)
    beh = np.array(rows) if rows else np.zeros((0, behavior_dim(T)))
    gt = agents[ti].future.points.copy()
    return SceneGraph(scene.scene_id, target_id, ti, origin, rot, map_attrs, agent_attrs,
                      beh, np.array(anchors, dtype=np.int64), sizes, gt)


def query_scene_behaviors(scene: Scene, db: BehaviorDatabase | None, epsilon: float) -> dict[str, BehaviorSet]:
    if db is None:
        return {}
    out = {}
    for ag in scene.agents:
        out[ag.agent_id] = query_local_behavior(db, current_location(ag.observed), epsilon,
                                                exclude={ag.observed.key})
    return out


def prepare_graphs(scenes: SceneSet, lane_map: LaneMap, db: BehaviorDatabase | None,
                   cfg: ExperimentConfig) -> list[SceneGraph]:
    """One graph per (scene, target agent), behavior sets queried at each agent's current location."""
    mi = MapIndex.from_lane_map(lane_map)
    graphs = []
    for sc in scenes:
        bsets = query_scene_behaviors(sc, db, cfg.epsilon)
        for tid in sc.target_agent_ids:
            graphs.append(build_scene_graph(sc, tid, bsets, mi, cfg))
    return graphs


@dataclass
class Batch:
    map_x: np.ndarray
    map_mask: np.ndarray
    agent_x: np.ndarray
    agent_mask: np.ndarray
    beh_x: np.ndarray
    beh_mask: np.ndarray
    beh_assign: np.ndarray  # (B, Na, Nb) row-normalised anchor pooling weights
    target_index: np.ndarray
    origin: np.ndarray
    rot: np.ndarray
    gt_local: np.ndarray | None
    gt_global: np.ndarray | None
    sizes: np.ndarray

    @property
    def B(self) -> int:
        return len(self.target_index)

    @property
    def base_mask(self) -> np.ndarray:
        return np.concatenate([self.map_mask, self.agent_mask], axis=1)

    @property
    def n_map(self) -> int:
        return self.map_x.shape[1]

    def without_behavior(self) -> "Batch":
        """Same batch with every behavior node masked out (nodes kept)."""
        return Batch(self.map_x, self.map_mask, self.agent_x, self.agent_mask, self.beh_x,
                     np.zeros_like(self.beh_mask), np.zeros_like(self.beh_assign),
                     self.target_index, self.origin, self.rot, self.gt_local, self.gt_global, self.sizes)

    def drop_behavior(self) -> "Batch":
        """Same batch with the behavior node set removed entirely."""
        B = self.B
        return Batch(self.map_x, self.map_mask, self.agent_x, self.agent_mask,
                     np.zeros((B, 0, self.beh_x.shape[2])), np.zeros((B, 0), dtype=bool),
                     np.zeros((B, self.agent_x.shape[1], 0)), self.target_index, self.origin,
                     self.rot, self.gt_local, self.gt_global, self.sizes)


def collate(graphs: list[SceneGraph], t_obs: int) -> Batch:
    B = len(graphs)
    nm = max((len(g.map_attrs) for g in graphs), default=0)
    na = max(len(g.agent_attrs) for g in graphs)
    nb = max((len(g.behavior_attrs) for g in graphs), default=0)
    map_x = np.zeros((B, nm, MAP_DIM))
    map_mask = np.zeros((B, nm), dtype=bool)
    agent_x = np.zeros((B, na, agent_dim(t_obs)))
    agent_mask = np.zeros((B, na), dtype=bool)
    beh_x = np.zeros((B, nb, behavior_dim(t_obs)))
    beh_mask = np.zeros((B, nb), dtype=bool)
    assign = np.zeros((B, na, nb))
    has_gt = all(g.gt_future is not None for g in graphs)
    T_fut = len(graphs[0].gt_future) if has_gt else 0
    gt_local = np.zeros((B, T_fut, 2)) if has_gt else None
    gt_global = np.zeros((B, T_fut, 2)) if has_gt else None
    for b, g in enumerate(graphs):
        m, a, v = len(g.map_attrs), len(g.agent_attrs), len(g.behavior_attrs)
        map_x[b, :m] = g.map_attrs
        map_mask[b, :m] = True
        agent_x[b, :a] = g.agent_attrs
        agent_mask[b, :a] = True
        beh_x[b, :v] = g.behavior_attrs
        beh_mask[b, :v] = True
        if v:
            assign[b, g.behavior_anchor, np.arange(v)] = 1.0
        if has_gt:
            gt_global[b] = g.gt_future
            gt_local[b] = to_local(g.gt_future, g.origin, g.rot)
    cnt = assign.sum(axis=2, keepdims=True)
    assign = assign / np.where(cnt > 0, cnt, 1.0)
    return Batch(map_x, map_mask, agent_x, agent_mask, beh_x, beh_mask, assign,
                 np.array([g.target_index for g in graphs]),
                 np.stack([g.origin for g in graphs]), np.stack([g.rot for g in graphs]),
                 gt_local, gt_global, np.array([g.target_size for g in graphs]))
