"""Rasterised pathway: patch encoders over BEV scene images and behavior probability maps.

The raster frame is the target's grid: translation to the current location
only, since the grid axes stay aligned with the world axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..behavior_db import BehaviorDatabase
from ..core_data import ExperimentConfig, LaneMap, Scene, SceneSet, current_location
from ..raster import (BehaviorProbMap, Grid, SceneImage, check_same_grid, rasterize_polyline,
                      render_behavior_prob_map, render_scene_image)
from .graph import query_scene_behaviors
from .nets import Forward, _init_block, _init_linear, decode, encode, init_decoder, init_encoder, lin, res_block

MODES = ("baseline", "lba", "lbf")


@dataclass
class RasterSample:
    scene_id: str
    target_id: str
    image: SceneImage
    prob: BehaviorProbMap | None
    origin: np.ndarray
    target_size: int
    gt_future: np.ndarray | None = None


def _lane_mask(lane_map: LaneMap, grid: Grid) -> np.ndarray:
    x0, y0 = grid.origin
    x1, y1 = x0 + grid.W * grid.resolution, y0 + grid.H * grid.resolution
    cover: set = set()
    for ln in lane_map.lanes:
        pl = np.asarray(ln.polyline)
        lo, hi = pl.min(axis=0), pl.max(axis=0)
        if hi[0] < x0 or lo[0] > x1 or hi[1] < y0 or lo[1] > y1:
            continue
        cover |= rasterize_polyline(pl, grid)
    m = np.zeros((grid.H, grid.W))
    if cover:
        r, c = zip(*cover)
        m[list(r), list(c)] = 1.0
    return m


def build_raster_sample(scene: Scene, target_id: str, lane_map: LaneMap, behaviors, cfg: ExperimentConfig):
    ag = scene.agent(target_id)
    origin = np.asarray(current_location(ag.observed), dtype=float)
    grid = Grid.centered(origin, cfg.raster_size, cfg.raster_resolution)
    img = render_scene_image(scene, target_id, grid, lane_mask=_lane_mask(lane_map, grid))
    prob = render_behavior_prob_map(behaviors, grid) if behaviors is not None else None
    size = len(behaviors) if behaviors is not None else 0
    return RasterSample(scene.scene_id, target_id, img, prob, origin, size, ag.future.points.copy())


def prepare_raster_samples(scenes: SceneSet, lane_map: LaneMap, db: BehaviorDatabase | None,
                           cfg: ExperimentConfig) -> list[RasterSample]:
    out = []
    for sc in scenes:
        bsets = query_scene_behaviors(sc, db, cfg.epsilon) if db is not None else {}
        for tid in sc.target_agent_ids:
            out.append(build_raster_sample(sc, tid, lane_map, bsets.get(tid), cfg))
    return out


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """(B, Ch, H, W) -> (B, n_patches, Ch*p*p + 2); the last two columns are patch centres in [-1, 1]."""
    B, Ch, H, W = x.shape
    gh, gw = H // p, W // p
    t = x.reshape(B, Ch, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, gh * gw, Ch * p * p)
    rr, cc = np.meshgrid((np.arange(gh) + 0.5) / gh * 2 - 1, (np.arange(gw) + 0.5) / gw * 2 - 1, indexing="ij")
    coords = np.broadcast_to(np.stack([rr.ravel(), cc.ravel()], axis=1), (B, gh * gw, 2))
    return np.concatenate([t, coords], axis=2)


@dataclass
class RasterBatch:
    img_patches: np.ndarray
    prob_patches: np.ndarray | None
    origin: np.ndarray
    rot: np.ndarray
    gt_local: np.ndarray | None
    sizes: np.ndarray

    @property
    def B(self) -> int:
        return len(self.origin)


def collate_raster(samples: list[RasterSample], cfg: ExperimentConfig, with_prob: bool = True) -> RasterBatch:
    p = cfg.raster_patch
    g0 = samples[0].image.grid
    img = np.stack([s.image.channels for s in samples])
    prob = None
    if with_prob:
        maps = []
        for s in samples:
            if s.prob is None:
                maps.append(np.zeros((1, g0.H, g0.W)))
            else:
                check_same_grid(s.prob.grid, s.image.grid)
                maps.append(s.prob.values[None])
        prob = patchify(np.stack(maps), p)
    origin = np.stack([s.origin for s in samples])
    B = len(samples)
    rot = np.broadcast_to(np.eye(2), (B, 2, 2)).copy()
    gt = None
    if all(s.gt_future is not None for s in samples):
        gt = np.stack([s.gt_future for s in samples]) - origin[:, None, :]
    return RasterBatch(patchify(img, p), prob, origin, rot, gt, np.array([s.target_size for s in samples]))


def init_raster_params(cfg: ExperimentConfig, mode: str, n_channels: int | None = None,
                       seed: int | None = None) -> dc.ParamStore:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    C, p = cfg.feature_dim, cfg.raster_patch
    n_channels = cfg.T_obs + 2 if n_channels is None else n_channels
    ps = dc.ParamStore(cfg.seed if seed is None else seed)
    init_encoder(ps, "enc_img", n_channels * p * p + 2, C)
    width = C
    if mode == "lba":
        init_encoder(ps, "enc_prob", p * p + 2, C)
        width = 2 * C
    elif mode == "lbf":
        _init_block(ps, "est/blk0", C)
        _init_block(ps, "est/blk1", C)
        _init_linear(ps, "est/out", C, C)
        width = 2 * C
    init_decoder(ps, cfg.n_modes, cfg.T_fut, width)
    ps.meta = {"mode": mode, "pathway": "raster", "config": cfg.to_dict()}
    return ps


def encode_patches(P, name: str, patches) -> dc.Tensor:
    """Shared per-patch encoder, mean-pooled over patches -> (B, C)."""
    return dc.mean(encode(P, name, patches), axis=1)


def encode_scene_image(P, patches):
    return encode_patches(P, "enc_img", patches)


def encode_prob_map(P, patches):
    return encode_patches(P, "enc_prob", patches)


def estimate_behavior_raster(P, f_scene) -> dc.Tensor:
    h = res_block(P, "est/blk1", res_block(P, "est/blk0", f_scene))
    return lin(P, "est/out", h)


def forward_raster(P, cfg: ExperimentConfig, batch: RasterBatch, mode: str) -> Forward:
    f_img = encode_scene_image(P, batch.img_patches)
    valid = np.ones((batch.B, 1), dtype=bool)
    if mode == "baseline":
        f_S = f_img
        pooled = None
    elif mode == "lba":
        if batch.prob_patches is None:
            raise ValueError("teacher needs probability maps")
        pooled = encode_prob_map(P, batch.prob_patches)
        f_S = dc.concat([f_img, pooled], axis=1)
    elif mode == "lbf":
        pooled = estimate_behavior_raster(P, f_img)
        f_S = dc.concat([f_img, pooled], axis=1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    pos, logits = decode(P, cfg, f_S)
    if pooled is not None:
        pooled = dc.reshape(pooled, (batch.B, 1, pooled.shape[-1]))
    return Forward(pos, logits, f_S, pooled, valid if pooled is not None else None, f_img)
