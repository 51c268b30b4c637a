"""BEV rasterisation: behavior probability maps and scene images on a shared grid.

Pixel ``(row, col)`` covers the half-open square
``[ox + col*res, ox + (col+1)*res) x [oy + row*res, oy + (row+1)*res)``
where ``(ox, oy)`` is the grid origin. Rows grow with +y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .behavior_db import BehaviorSet
from .core_data import LaneMap, Scene, current_location, fmt_float


# direction components below this are treated as parallel (avoids overflow on subnormals)
_TINY = 1e-200


class TargetOutsideGrid(ValueError):
    pass


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    H: int
    W: int
    resolution: float
    origin: tuple[float, float]

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ValueError("grid must be at least 1x1")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")

    @classmethod
    def centered(cls, center, size: int = 64, resolution: float = 0.5) -> "Grid":
        half = size * resolution / 2.0
        return cls(size, size, resolution, (float(center[0]) - half, float(center[1]) - half))

    def pixel_of(self, x: float, y: float) -> tuple[int, int]:
        return (math.floor((y - self.origin[1]) / self.resolution),
                math.floor((x - self.origin[0]) / self.resolution))

    def contains(self, rc) -> bool:
        return 0 <= rc[0] < self.H and 0 <= rc[1] < self.W


@dataclass(frozen=True)
class BehaviorProbMap:
    grid: Grid
    values: np.ndarray


@dataclass(frozen=True)
class SceneImage:
    grid: Grid
    channels: np.ndarray  # (n_channels, H, W): lane, T_obs agent steps, target

    @property
    def lane(self) -> np.ndarray:
        return self.channels[0]

    @property
    def target(self) -> np.ndarray:
        return self.channels[-1]


def _clip_to_box(x0, y0, x1, y1, xmin, ymin, xmax, ymax):
    """Liang-Barsky clip; returns parameters (t0, t1) or None."""
    dx, dy = x1 - x0, y1 - y0
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, x0 - xmin), (dx, xmax - x0), (-dy, y0 - ymin), (dy, ymax - y0)):
        if abs(p) < _TINY:
            if q < 0.0:
                return None
        else:
            r = q / p
            if p < 0.0:
                if r > t1:
                    return None
                t0 = max(t0, r)
            else:
                if r < t0:
                    return None
                t1 = min(t1, r)
    return t0, t1


def _segment_cells(p0, p1, grid: Grid, out: set) -> None:
    ox, oy = grid.origin
    res = grid.resolution
    # work in pixel units: u = column coordinate, v = row coordinate
    u0, v0 = (p0[0] - ox) / res, (p0[1] - oy) / res
    u1, v1 = (p1[0] - ox) / res, (p1[1] - oy) / res
    clip = _clip_to_box(u0, v0, u1, v1, 0.0, 0.0, float(grid.W), float(grid.H))
    if clip is None:
        return
    t0, t1 = clip
    du, dv = u1 - u0, v1 - v0
    a_u, a_v = u0 + t0 * du, v0 + t0 * dv
    b_u, b_v = u0 + t1 * du, v0 + t1 * dv
    col, row = math.floor(a_u), math.floor(a_v)
    end_col, end_row = math.floor(b_u), math.floor(b_v)
    step_c = 1 if du > 0 else -1
    step_r = 1 if dv > 0 else -1
    su, sv = b_u - a_u, b_v - a_v
    # Amanatides-Woo traversal over the clipped piece
    if abs(su) >= _TINY:
        next_u = col + 1 if step_c > 0 else col
        t_max_u = (next_u - a_u) / su
        t_delta_u = 1.0 / abs(su)
    else:
        t_max_u = t_delta_u = math.inf
    if abs(sv) >= _TINY:
        next_v = row + 1 if step_r > 0 else row
        t_max_v = (next_v - a_v) / sv
        t_delta_v = 1.0 / abs(sv)
    else:
        t_max_v = t_delta_v = math.inf
    n_steps = abs(end_col - col) + abs(end_row - row)
    H, W = grid.H, grid.W
    for _ in range(n_steps + 1):
        if 0 <= row < H and 0 <= col < W:
            out.add((row, col))
        if row == end_row and col == end_col:
            break
        if t_max_u < t_max_v:
            col += step_c
            t_max_u += t_delta_u
        elif t_max_v < t_max_u:
            row += step_r
            t_max_v += t_delta_v
        else:
            # exact lattice-corner crossing: move diagonally
            col += step_c
            row += step_r
            t_max_u += t_delta_u
            t_max_v += t_delta_v
    if 0 <= end_row < H and 0 <= end_col < W:
        out.add((end_row, end_col))


def rasterize_polyline(points, grid: Grid) -> set[tuple[int, int]]:
    """Supercover pixel set of a polyline: every pixel its path passes through."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 1:
        return set()
    out: set[tuple[int, int]] = set()
    if len(pts) == 1:
        rc = grid.pixel_of(*pts[0])
        if grid.contains(rc):
            out.add(rc)
        return out
    for a, b in zip(pts[:-1], pts[1:]):
        _segment_cells(a, b, grid, out)
    return out


def _mask(pixels, grid: Grid) -> np.ndarray:
    m = np.zeros((grid.H, grid.W))
    if pixels:
        r, c = zip(*pixels)
        m[list(r), list(c)] = 1.0
    return m


def render_behavior_prob_map(behaviors, grid: Grid) -> BehaviorProbMap:
    """Count trajectories covering each pixel (once per trajectory), divide by the max."""
    members = behaviors.members if isinstance(behaviors, BehaviorSet) else behaviors
    counts = np.zeros((grid.H, grid.W))
    for traj in members:
        pts = traj.points if hasattr(traj, "points") else traj
        counts += _mask(rasterize_polyline(pts, grid), grid)
    peak = counts.max()
    values = counts / peak if peak > 0 else counts
    return BehaviorProbMap(grid, values)


def render_scene_image(scene: Scene, target_agent: str, grid: Grid, lane_map: LaneMap | None = None,
                       lane_mask: np.ndarray | None = None) -> SceneImage:
    """Lane occupancy, per-timestep agent occupancy, and the target's current pixel."""
    target = scene.agent(target_agent)
    t_obs = len(target.observed.points)
    rc = grid.pixel_of(*current_location(target.observed))
    if not grid.contains(rc):
        raise TargetOutsideGrid(f"target {target_agent} at pixel {rc} is outside the grid")
    ch = np.zeros((t_obs + 2, grid.H, grid.W))
    if lane_mask is not None:
        ch[0] = lane_mask
    elif lane_map is not None:
        cover: set = set()
        for ln in lane_map.lanes:
            cover |= rasterize_polyline(ln.polyline, grid)
        ch[0] = _mask(cover, grid)
    for ag in scene.agents:
        for t, (x, y) in enumerate(ag.observed.points[:t_obs]):
            p = grid.pixel_of(x, y)
            if grid.contains(p):
                ch[1 + t, p[0], p[1]] = 1.0
    ch[-1, rc[0], rc[1]] = 1.0
    return SceneImage(grid, ch)


def check_same_grid(a: Grid, b: Grid) -> None:
    if a != b:
        raise GridMismatch(f"{a} != {b}")


def write_matrix_csv(values: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        for row in values:
            fh.write(",".join(fmt_float(v) for v in row) + "\n")


def write_pgm(values: np.ndarray, path) -> None:
    """8-bit binary PGM, row 0 at the bottom (image top = max y)."""
    img = np.clip(np.rint(np.asarray(values)[::-1] * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
