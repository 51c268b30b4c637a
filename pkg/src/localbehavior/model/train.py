"""Adam training loops for the baseline, the LBA teacher and the LBF student."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import diffcore as dc
from ..core_data import ExperimentConfig
from .graph import Batch, collate
from .nets import forward, init_params, kd_pairs, loss_kd, loss_pred

log = logging.getLogger(__name__)


class DivergenceDetected(FloatingPointError):
    pass


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float      # mean total objective per batch
    pred: float      # mean L_pred per batch
    kd: float = 0.0  # mean weighted KD term per batch
    kd_raw: float = 0.0  # mean unweighted distillation distance per batch


@dataclass
class TrainResult:
    params: dc.ParamStore
    history: list[EpochStats] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(h, name) for h in self.history])


def lr_at(cfg: ExperimentConfig, epoch: int) -> float:
    """Step schedule; ``epoch`` is 0-based."""
    return cfg.lr if epoch < cfg.lr_decay_epoch else cfg.lr_decay_to


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _finite_or_raise(x: float, epoch: int, step: int) -> None:
    if not np.isfinite(x):
        raise DivergenceDetected(f"loss became non-finite at epoch {epoch + 1}, step {step}")


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7, epoch]))


def _step(ps: dc.ParamStore, loss_fn, lr: float):
    with dc.Tape() as tape:
        P = ps.bind()
        parts = loss_fn(P)
        dc.backward(tape, parts[0])
    dc.adam_step(ps, dc.collect_grads(P), lr=lr)
    return parts


@dataclass
class Pathway:
    init: object
    collate: object
    forward: object


def pathway(cfg: ExperimentConfig) -> Pathway:
    if cfg.pathway == "raster":
        from .raster_nets import collate_raster, forward_raster, init_raster_params

        return Pathway(lambda c, m, s: init_raster_params(c, m, seed=s),
                       lambda items, c: collate_raster(items, c), forward_raster)
    return Pathway(init_params, lambda items, c: collate(items, c.T_obs), forward)


def train(graphs: list, cfg: ExperimentConfig, mode: str, teacher: dc.ParamStore | None = None,
          seed: int | None = None, epochs: int | None = None, callback=None,
          teacher_mode: str = "lba") -> TrainResult:
    """Train one model from scratch. ``mode='lbf'`` requires a frozen ``teacher``.

    ``graphs`` holds scene graphs, or raster samples when ``cfg.pathway`` is raster.
    """
    if not graphs:
        raise ValueError("no training samples")
    seed = cfg.seed if seed is None else seed
    epochs = cfg.epochs if epochs is None else epochs
    if mode == "lbf" and teacher is None:
        raise ValueError("student training needs a teacher")
    pw = pathway(cfg)
    ps = pw.init(cfg, mode, seed)
    result = TrainResult(ps)
    teacher_P = teacher.bind(requires_grad=False) if teacher is not None else None

    for ep in range(epochs):
        lr = lr_at(cfg, ep)
        sums = np.zeros(4)
        nb = 0
        for step, idx in enumerate(batches(len(graphs), cfg.batch_size, _epoch_rng(seed, ep))):
            batch = pw.collate([graphs[i] for i in idx], cfg)
            try:
                if mode == "lbf":
                    with dc.no_tape():
                        t_fw = pw.forward(teacher_P, cfg, batch, teacher_mode)

                    def fn(P, batch=batch, t_fw=t_fw):
                        fw = pw.forward(P, cfg, batch, "lbf")
                        lp = loss_pred(fw.pos, fw.logits, batch.gt_local)[0]
                        pairs = kd_pairs(fw, t_fw, cfg.kd_sites, cfg.use_estimator)
                        raw = loss_kd(pairs, 1.0, norm=cfg.kd_norm)
                        kd = dc.mul(raw, float(cfg.lambda_kd))
                        return lp + kd, lp, kd, raw
                else:
                    def fn(P, batch=batch):
                        fw = pw.forward(P, cfg, batch, mode)
                        lp = loss_pred(fw.pos, fw.logits, batch.gt_local)[0]
                        return lp, lp
                parts = _step(ps, fn, lr)
            except (dc.NonFiniteValue, dc.NonFiniteGradient) as exc:
                raise DivergenceDetected(f"epoch {ep + 1}, step {step}: {exc}") from exc
            vals = [p.item() for p in parts]
            _finite_or_raise(vals[0], ep, step)
            sums[:len(vals)] += vals
            nb += 1
        m = sums / nb
        st = EpochStats(ep + 1, lr, m[0], m[1], m[2], m[3])
        result.history.append(st)
        log.info("%s epoch %d lr=%.2e loss=%.4f pred=%.4f kd=%.4f", mode, ep + 1, lr, st.loss, st.pred, st.kd)
        if callback is not None:
            callback(st)
    ps.meta = {**ps.meta, "seed": seed, "epochs": epochs}
    return result


def train_baseline(graphs, cfg, **kw) -> TrainResult:
    return train(graphs, cfg, "baseline", **kw)


def train_teacher(graphs, cfg, **kw) -> TrainResult:
    return train(graphs, cfg, "lba", **kw)


def train_student(graphs, teacher: dc.ParamStore, cfg, **kw) -> TrainResult:
    return train(graphs, cfg, "lbf", teacher=teacher, **kw)


def predict(ps: dc.ParamStore, cfg: ExperimentConfig, graphs: list, mode: str, batch_size: int = 64):
    """Global-frame modes (N, K, Tf, 2) and softmax scores (N, K)."""
    from .nets import predict_global

    pw = pathway(cfg)
    P = ps.bind(requires_grad=False)
    modes, scores = [], []
    with dc.no_tape():
        for s in range(0, len(graphs), batch_size):
            b = pw.collate(graphs[s:s + batch_size], cfg)
            if mode != "lba" and isinstance(b, Batch):
                b = b.drop_behavior()
            fw = pw.forward(P, cfg, b, mode)
            g, sc = predict_global(fw, b)
            modes.append(g)
            scores.append(sc)
    return np.concatenate(modes), np.concatenate(scores)
