"""Displacement metrics, behavior-size buckets, lane statistics, reports and sweeps."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .behavior_db import BehaviorDatabase
from .core_data import ExperimentConfig, LaneMap, fmt_float

log = logging.getLogger(__name__)

MISS_THRESHOLD = 2.0
BUCKET_EDGES = (0, 4, 8, 12, 16)
BUCKET_LABELS = ("[0,4)", "[4,8)", "[8,12)", "[12,16)", "[16,inf)")
TURN_THRESHOLD_DEG = 30.0


class EmptyDataset(ValueError):
    pass


@dataclass
class PredictionSet:
    modes: np.ndarray   # (N, K, T_fut, 2) global frame
    scores: np.ndarray  # (N, K), rows sum to 1

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.modes.ndim == 3:
            self.modes = self.modes[None]
            self.scores = self.scores.reshape(1, -1)
        if self.modes.shape[:2] != self.scores.shape:
            raise ValueError(f"modes {self.modes.shape} vs scores {self.scores.shape}")

    @property
    def K(self) -> int:
        return self.modes.shape[1]

    def __len__(self):
        return self.modes.shape[0]


def _as_pred(pred, scores=None) -> PredictionSet:
    if isinstance(pred, PredictionSet):
        return pred
    modes = np.asarray(pred, dtype=np.float64)
    if scores is None:
        k = modes.shape[-3]
        scores = np.full(modes.shape[:-2], 1.0 / k)
    return PredictionSet(modes, scores)


def _gt(gt, n: int) -> np.ndarray:
    g = np.asarray(gt, dtype=np.float64)
    if g.ndim == 2:
        g = g[None]
    if g.shape[0] != n:
        raise ValueError(f"{n} predictions vs {g.shape[0]} ground truths")
    return g


def top_k(pred: PredictionSet, k: int) -> np.ndarray:
    """Indices (N, k) of the k highest-scored modes; ties go to the lower index."""
    if not 1 <= k <= pred.K:
        raise ValueError(f"k={k} outside 1..{pred.K}")
    return np.argsort(-pred.scores, axis=1, kind="stable")[:, :k]


def _sel(pred: PredictionSet, k: int) -> np.ndarray:
    idx = top_k(pred, k)
    return np.take_along_axis(pred.modes, idx[:, :, None, None], axis=1)


def displacement(pred, gt, k: int, scores=None) -> np.ndarray:
    """Pointwise errors (N, k, T) of the top-k modes."""
    p = _as_pred(pred, scores)
    sel = _sel(p, k)
    g = _gt(gt, len(p))
    return np.linalg.norm(sel - g[:, None], axis=-1)


def min_ade_k(pred, gt, k: int, scores=None, reduce: bool = False):
    """Per-instance min over the top-k modes of the mean pointwise error."""
    v = displacement(pred, gt, k, scores).mean(axis=2).min(axis=1)
    return float(v.mean()) if reduce else v


def min_fde_k(pred, gt, k: int, scores=None, reduce: bool = False):
    v = displacement(pred, gt, k, scores)[:, :, -1].min(axis=1)
    return float(v.mean()) if reduce else v


def miss_rate_k(pred, gt, k: int, scores=None, threshold: float = MISS_THRESHOLD) -> float:
    """Fraction of agents whose min_fde_k is strictly larger than ``threshold``."""
    p = _as_pred(pred, scores)
    if len(p) == 0:
        raise EmptyDataset("miss rate of an empty dataset")
    return float(np.mean(min_fde_k(p, gt, k) > threshold))


def horizon_errors(pred, gt, k: int = 1, scores=None) -> np.ndarray:
    """Per-step error (N, T) of the mode that attains min_fde_k."""
    d = displacement(pred, gt, k, scores)
    best = d[:, :, -1].argmin(axis=1)
    return d[np.arange(len(d)), best]


def horizon_gain_profile(preds_a, preds_b, gts, k: int = 1) -> np.ndarray:
    """For each future step: mean error of B minus mean error of A."""
    ea = horizon_errors(preds_a, gts, k)
    eb = horizon_errors(preds_b, gts, k)
    if ea.shape != eb.shape:
        raise ValueError("prediction sets are not aligned")
    return eb.mean(axis=0) - ea.mean(axis=0)


@dataclass
class BucketRow:
    label: str
    count: int
    percent: float
    min_fde_1: float  # nan when the bucket is empty


def bucket_index(sizes) -> np.ndarray:
    return np.digitize(np.asarray(sizes), BUCKET_EDGES[1:], right=False)


def behavior_size_buckets(pred, gts, sizes, scores=None) -> list[BucketRow]:
    """minFDE_1 averaged within behavior-set-size buckets."""
    fde = min_fde_k(pred, gts, 1, scores)
    return bucket_means(fde, sizes)


def bucket_means(values, sizes) -> list[BucketRow]:
    values = np.asarray(values, dtype=np.float64)
    bi = bucket_index(sizes)
    n = len(values)
    rows = []
    for b, label in enumerate(BUCKET_LABELS):
        m = bi == b
        c = int(m.sum())
        rows.append(BucketRow(label, c, 100.0 * c / n if n else 0.0, float(values[m].mean()) if c else float("nan")))
    return rows


# ---------------------------------------------------------------- lane statistics


def _point_segment_dist(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    den = float(ab @ ab)
    t = np.zeros(len(p)) if den == 0 else np.clip((p - a) @ ab / den, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(p[:, 0] - proj[:, 0], p[:, 1] - proj[:, 1])


def heading_change_deg(points: np.ndarray) -> float:
    d = np.diff(np.asarray(points), axis=0)
    a, b = d[0], d[-1]
    return float(np.degrees(np.arctan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1])))


@dataclass
class LaneStatRow:
    lane_id: str
    segment: int
    count: int
    n_turn: int
    mean_speed: float
    turn_ratio: float


def lane_behavior_stats(db: BehaviorDatabase, lane_map: LaneMap, epsilon: float,
                        threshold_deg: float = TURN_THRESHOLD_DEG) -> list[LaneStatRow]:
    """Aggregate behavior trajectories whose first point lies within ``epsilon`` of each lane segment."""
    if len(db.trajectories) == 0:
        return []
    first = db.first_points
    speeds = np.array([t.mean_speed() for t in db.trajectories])
    turned = np.array([abs(heading_change_deg(t.points)) > threshold_deg for t in db.trajectories])
    rows = []
    for lane in lane_map.lanes:
        pl = np.asarray(lane.polyline)
        for s in range(len(pl) - 1):
            near = _point_segment_dist(first, pl[s], pl[s + 1]) < epsilon
            c = int(near.sum())
            if c == 0:
                continue
            nt = int(turned[near].sum())
            rows.append(LaneStatRow(lane.lane_id, s, c, nt, float(speeds[near].mean()), nt / c))
    return rows


def write_lane_stats(rows: list[LaneStatRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lane_id", "segment", "count", "n_turn", "mean_speed", "turn_ratio"])
        for r in rows:
            w.writerow([r.lane_id, r.segment, r.count, r.n_turn, fmt_float(r.mean_speed), fmt_float(r.turn_ratio)])


# ---------------------------------------------------------------- reports


REPORT_COLUMNS = ("label", "metric", "k", "key", "value")


@dataclass
class MetricsReport:
    label: str
    n: int
    ks: tuple[int, ...]
    min_ade: dict[int, float]
    min_fde: dict[int, float]
    miss_rate: dict[int, float]
    horizon_fde: np.ndarray
    buckets: list[BucketRow] = field(default_factory=list)

    def rows(self) -> list[tuple]:
        out = [(self.label, "count", "", "", str(self.n))]
        for k in self.ks:
            out.append((self.label, "minADE", str(k), "", fmt_float(self.min_ade[k])))
            out.append((self.label, "minFDE", str(k), "", fmt_float(self.min_fde[k])))
            out.append((self.label, "MR", str(k), "", fmt_float(self.miss_rate[k])))
        for t, v in enumerate(self.horizon_fde):
            out.append((self.label, "horizon_error", "1", str(t + 1), fmt_float(float(v))))
        for b in self.buckets:
            out.append((self.label, "bucket_count", "1", b.label, str(b.count)))
            out.append((self.label, "bucket_minFDE", "1", b.label, fmt_float(b.min_fde_1)))
        return out

    def value(self, metric: str, k: int = 1) -> float:
        return {"minADE": self.min_ade, "minFDE": self.min_fde, "MR": self.miss_rate}[metric][k]


def metrics_report(label: str, pred: PredictionSet, gts, sizes=None, ks=(1, 6)) -> MetricsReport:
    if len(pred) == 0:
        raise EmptyDataset("no predictions to evaluate")
    ks = tuple(k for k in ks if k <= pred.K)
    return MetricsReport(
        label, len(pred), ks,
        {k: min_ade_k(pred, gts, k, reduce=True) for k in ks},
        {k: min_fde_k(pred, gts, k, reduce=True) for k in ks},
        {k: miss_rate_k(pred, gts, k) for k in ks},
        horizon_errors(pred, gts, 1).mean(axis=0),
        behavior_size_buckets(pred, gts, sizes) if sizes is not None else [],
    )


def write_report(reports: list[MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerows(r.rows())


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_profile_svg(profile: np.ndarray, path, title: str = "") -> None:
    """Tiny dependency-free line plot of a per-step curve."""
    y = np.asarray(profile, dtype=float)
    W, H, pad = 400, 240, 30
    lo, hi = min(0.0, y.min()), max(0.0, y.max())
    span = hi - lo or 1.0
    xs = pad + (W - 2 * pad) * np.arange(len(y)) / max(len(y) - 1, 1)
    ys = H - pad - (H - 2 * pad) * (y - lo) / span
    y0 = H - pad - (H - 2 * pad) * (0 - lo) / span
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))
    Path(path).write_text(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">'
        f'<text x="{pad}" y="16" font-size="12">{title}</text>'
        f'<line x1="{pad}" y1="{y0:.2f}" x2="{W - pad}" y2="{y0:.2f}" stroke="gray"/>'
        f'<polyline fill="none" stroke="black" points="{pts}"/></svg>\n')


# ---------------------------------------------------------------- model evaluation and sweeps


def evaluate_model(ps, cfg: ExperimentConfig, graphs, mode: str, label: str | None = None,
                   ks=(1, 6)) -> tuple[MetricsReport, PredictionSet]:
    from .model.train import predict

    modes, scores = predict(ps, cfg, graphs, mode)
    pred = PredictionSet(modes, scores)
    gts = np.stack([g.gt_future for g in graphs])
    sizes = np.array([g.target_size for g in graphs])
    return metrics_report(label or mode, pred, gts, sizes, ks), pred


SWEEP_COLUMNS = ("epsilon", "lambda_kd", "kd_sites", "model", "seed", "minADE_1", "minFDE_1", "MR_1",
                 "minADE_K", "minFDE_K", "MR_K")


def ablation_sweep(bench, cfg: ExperimentConfig, epsilons=(0.5, 1.0, 1.5), lambdas=(0.0, 1.0, 1.5, 2.0),
                   kd_sites=(1, 2), seeds=(0,), eps_scale: float = 1.0, include_baseline: bool = True) -> list[dict]:
    """One train+eval per grid cell. A teacher is trained once per (epsilon, seed) and reused."""
    from .model.graph import prepare_graphs
    from .model.train import train

    lane_map = bench.world.lane_map
    K = cfg.n_modes
    rows = []

    def row(eps, lam, sites, model, seed, rep):
        return {"epsilon": eps, "lambda_kd": lam, "kd_sites": sites, "model": model, "seed": seed,
                "minADE_1": rep.min_ade[1], "minFDE_1": rep.min_fde[1], "MR_1": rep.miss_rate[1],
                "minADE_K": rep.min_ade[K], "minFDE_K": rep.min_fde[K], "MR_K": rep.miss_rate[K]}

    for seed in seeds:
        if include_baseline:
            c0 = cfg.with_(seed=seed)
            gtr = prepare_graphs(bench.splits["train"], lane_map, None, c0)
            gte = prepare_graphs(bench.splits["test"], lane_map, None, c0)
            ps = train(gtr, c0, "baseline").params
            rows.append(row("", "", "", "baseline", seed, evaluate_model(ps, c0, gte, "baseline", ks=(1, K))[0]))
        for eps in epsilons:
            c = cfg.with_(seed=seed, epsilon=float(eps) * eps_scale)
            gtr = prepare_graphs(bench.splits["train"], lane_map, bench.dbs["train"], c)
            gte = prepare_graphs(bench.splits["test"], lane_map, bench.dbs["test"], c)
            teacher = train(gtr, c, "lba").params
            rows.append(row(eps, "", "", "lba", seed, evaluate_model(teacher, c, gte, "lba", ks=(1, K))[0]))
            for lam, sites in itertools.product(lambdas, kd_sites):
                cs = c.with_(lambda_kd=float(lam), kd_sites=int(sites))
                student = train(gtr, cs, "lbf", teacher=teacher).params
                rows.append(row(eps, lam, sites, "lbf", seed,
                                evaluate_model(student, cs, gte, "lbf", ks=(1, K))[0]))
                log.info("sweep cell eps=%s lambda=%s sites=%s seed=%s done", eps, lam, sites, seed)
    return rows


def write_sweep(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([fmt_float(r[c]) if isinstance(r[c], float) else str(r[c]) for c in SWEEP_COLUMNS])
