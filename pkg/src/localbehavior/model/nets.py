"""Graph-pathway networks: baseline, LBA teacher, LBF student.

All three share the same map/agent encoders, interaction module and decoder
parameter names, so a teacher's weights run the baseline path unchanged.
Attribute units are metres; inputs are divided by ``ATTR_SCALE`` on entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..diffcore import Tensor
from ..core_data import ExperimentConfig
from .graph import MAP_DIM, Batch, agent_dim, behavior_dim

ATTR_SCALE = 5.0
LN_EPS = 1e-5
MODES = ("baseline", "lba", "lbf")


# ---------------------------------------------------------------- parameter builders


def _init_linear(ps: dc.ParamStore, name: str, n_in: int, n_out: int, bias: bool = True, zero: bool = False):
    if zero:
        ps.zeros(f"{name}/W", n_in, n_out)
    else:
        ps.glorot(f"{name}/W", n_in, n_out)
    if bias:
        ps.zeros(f"{name}/b", n_out)


def _init_ln(ps, name, C):
    ps.ones(f"{name}/g", C)
    ps.zeros(f"{name}/b", C)


def _init_block(ps, name, C):
    _init_ln(ps, f"{name}/ln", C)
    _init_linear(ps, f"{name}/l1", C, C)
    _init_linear(ps, f"{name}/l2", C, C)


def init_encoder(ps, name, n_in, C, n_blocks=2):
    _init_linear(ps, f"{name}/in", n_in, C)
    for k in range(n_blocks):
        _init_block(ps, f"{name}/blk{k}", C)


def _init_attn(ps, name, C):
    _init_ln(ps, f"{name}/ln", C)
    for p in ("q", "k", "v", "o"):
        _init_linear(ps, f"{name}/{p}", C, C, bias=False)


def init_params(cfg: ExperimentConfig, mode: str, seed: int | None = None) -> dc.ParamStore:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    C, T = cfg.feature_dim, cfg.T_obs
    ps = dc.ParamStore(cfg.seed if seed is None else seed)
    init_encoder(ps, "enc_map", MAP_DIM, C)
    init_encoder(ps, "enc_agent", agent_dim(T), C)
    if mode == "lba":
        init_encoder(ps, "enc_beh", behavior_dim(T), C)
    for r in range(cfg.n_rounds):
        _init_attn(ps, f"int/r{r}/att", C)
        _init_block(ps, f"int/r{r}/mlp", C)
    if mode == "lbf":
        ps.normal("est/tokens", cfg.m_est, C, sd=1.0)
        _init_linear(ps, "est/agent", C, C)
        _init_attn(ps, "est/att", C)
        _init_block(ps, "est/mlp", C)
        _init_linear(ps, "est/out", C, C)
        _init_attn(ps, "fuse/att", C)
    init_decoder(ps, cfg.n_modes, cfg.T_fut, C)
    ps.meta = {"mode": mode, "pathway": "graph", "config": cfg.to_dict()}
    return ps


def init_decoder(ps: dc.ParamStore, K: int, Tf: int, C: int) -> None:
    ps.add("dec/l1/W", np.stack([ps._rng.uniform(-1, 1, (C, C)) * np.sqrt(6.0 / (2 * C)) for _ in range(K)]))
    ps.zeros("dec/l1/b", K, 1, C)
    ps.add("dec/l2/W", np.stack([ps._rng.uniform(-1, 1, (C, 2 * Tf)) * np.sqrt(6.0 / (C + 2 * Tf)) for _ in range(K)]))
    ps.zeros("dec/l2/b", K, 1, 2 * Tf)
    _init_linear(ps, "dec/score", C, K)


# ---------------------------------------------------------------- building blocks


def lin(P, name, x, bias=True):
    return dc.linear(x, P[f"{name}/W"], P[f"{name}/b"] if bias else None)


def ln(P, name, x):
    return dc.layer_norm(x, P[f"{name}/g"], P[f"{name}/b"], eps=LN_EPS)


def res_block(P, name, h):
    z = lin(P, f"{name}/l2", dc.relu(lin(P, f"{name}/l1", ln(P, f"{name}/ln", h))))
    return h + z


def encode(P, name, x, n_blocks=2):
    """Per-node encoder: input projection then residual blocks; nodes are independent."""
    h = lin(P, f"{name}/in", dc.mul(x, 1.0 / ATTR_SCALE))
    for k in range(n_blocks):
        h = res_block(P, f"{name}/blk{k}", h)
    return h


def _heads(x: Tensor, H: int) -> Tensor:
    B, N, C = x.shape
    return dc.transpose(dc.reshape(x, (B, N, H, C // H)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    B, H, N, d = x.shape
    return dc.reshape(dc.transpose(x, (0, 2, 1, 3)), (B, N, H * d))


def mha(P, name, hq: Tensor, keys: list[Tensor], masks: list[np.ndarray], H: int) -> Tensor:
    """Multi-head attention of (pre-normalised) ``hq`` over key groups."""
    q = _heads(lin(P, f"{name}/q", hq, bias=False), H)
    ks = [_heads(lin(P, f"{name}/k", kk, bias=False), H) for kk in keys]
    vs = [_heads(lin(P, f"{name}/v", kk, bias=False), H) for kk in keys]
    out = dc.scaled_dot_attention(q, ks, vs, [m[:, None] for m in masks])
    return lin(P, f"{name}/o", _merge(out), bias=False)


def _key_mask(nq: int, key_valid: np.ndarray) -> np.ndarray:
    return np.broadcast_to(key_valid[:, None, :], (key_valid.shape[0], nq, key_valid.shape[1]))


def interact(P, cfg: ExperimentConfig, h_base: Tensor, base_valid: np.ndarray,
             h_beh: Tensor | None = None, beh_valid: np.ndarray | None = None):
    """Rounds of masked self-attention over the node union, then per-node MLPs.

    With ``h_beh`` given, behavior nodes act as a second key group that every
    node can attend to, and they are updated alongside the base nodes.
    """
    H = cfg.n_heads
    nb = h_base.shape[1]
    for r in range(cfg.n_rounds):
        name = f"int/r{r}"
        xb = ln(P, f"{name}/att/ln", h_base)
        if h_beh is None:
            h_base = h_base + mha(P, f"{name}/att", xb, [xb], [_key_mask(nb, base_valid)], H)
        else:
            nv = h_beh.shape[1]
            xv = ln(P, f"{name}/att/ln", h_beh)
            upd_b = mha(P, f"{name}/att", xb, [xb, xv],
                        [_key_mask(nb, base_valid), _key_mask(nb, beh_valid)], H)
            upd_v = mha(P, f"{name}/att", xv, [xb, xv],
                        [_key_mask(nv, base_valid), _key_mask(nv, beh_valid)], H)
            h_base = h_base + upd_b
            h_beh = res_block(P, f"{name}/mlp", h_beh + upd_v)
        h_base = res_block(P, f"{name}/mlp", h_base)
    return h_base, h_beh


def estimate_behavior(P, cfg: ExperimentConfig, f_base: Tensor, base_valid: np.ndarray,
                      f_agent: Tensor) -> Tensor:
    """Pseudo-behavior tokens per agent, (B, Na, M, C), from map+agent features only."""
    B, Na, C = f_agent.shape
    M = cfg.m_est
    qa = lin(P, "est/agent", f_agent)  # (B, Na, C)
    q = dc.reshape(qa, (B, Na, 1, C)) + dc.reshape(P["est/tokens"], (1, 1, M, C))
    q = dc.reshape(q, (B, Na * M, C))
    h = q + mha(P, "est/att", ln(P, "est/att/ln", q), [f_base], [_key_mask(Na * M, base_valid)], cfg.n_heads)
    h = res_block(P, "est/mlp", h)
    out = lin(P, "est/out", h)
    return dc.reshape(out, (B, Na, M, C))


def fuse(P, cfg: ExperimentConfig, f_agent: Tensor, f_hat: Tensor) -> Tensor:
    """Each agent feature attends over its own M pseudo-behavior tokens, plus residual."""
    B, Na, M, C = f_hat.shape
    q = dc.reshape(ln(P, "fuse/att/ln", f_agent), (B * Na, 1, C))
    kv = dc.reshape(f_hat, (B * Na, M, C))
    out = mha(P, "fuse/att", q, [kv], [_key_mask(1, np.ones((B * Na, M), dtype=bool))], cfg.n_heads)
    return f_agent + dc.reshape(out, (B, Na, C))


def decode(P, cfg: ExperimentConfig, f: Tensor):
    """K parallel MLP heads -> (B, K, T_fut, 2) local positions, plus (B, K) logits."""
    B, C = f.shape
    K, Tf = cfg.n_modes, cfg.T_fut
    x = dc.reshape(f, (B, 1, 1, C))
    h = dc.relu(dc.matmul(x, P["dec/l1/W"]) + P["dec/l1/b"])        # (B, K, 1, C)
    d = dc.matmul(h, P["dec/l2/W"]) + P["dec/l2/b"]                 # (B, K, 1, 2Tf)
    disp = dc.reshape(d, (B, K, Tf, 2))
    pos = dc.cumsum(disp, axis=2)
    logits = lin(P, "dec/score", f)
    return pos, logits


def _take_targets(h_agent: Tensor, target_index: np.ndarray) -> Tensor:
    return dc.getitem(h_agent, (np.arange(len(target_index)), target_index))


@dataclass
class Forward:
    pos: Tensor          # (B, K, Tf, 2) agent frame
    logits: Tensor       # (B, K)
    f_S: Tensor          # (B, C) target feature fed to the decoder
    f_B_pooled: Tensor | None = None   # (B, Na, C) per-agent behavior features
    f_B_valid: np.ndarray | None = None  # (B, Na) agents with at least one behavior node
    f_S_prime: Tensor | None = None


def forward(P: dict, cfg: ExperimentConfig, batch: Batch, mode: str) -> Forward:
    f_M = encode(P, "enc_map", batch.map_x)
    f_X = encode(P, "enc_agent", batch.agent_x)
    f_base = dc.concat([f_M, f_X], axis=1)
    base_valid = batch.base_mask
    nm = batch.n_map
    if mode == "lba":
        f_B = encode(P, "enc_beh", batch.beh_x)
        h_base, _ = interact(P, cfg, f_base, base_valid, f_B, batch.beh_mask)
        h_agent = h_base[:, nm:]
        f_S = _take_targets(h_agent, batch.target_index)
        pooled = dc.matmul(batch.beh_assign, f_B)
        valid = batch.beh_assign.sum(axis=2) > 0
        pos, logits = decode(P, cfg, f_S)
        return Forward(pos, logits, f_S, pooled, valid)
    h_base, _ = interact(P, cfg, f_base, base_valid)
    h_agent = h_base[:, nm:]
    if mode == "baseline":
        f_S = _take_targets(h_agent, batch.target_index)
        pos, logits = decode(P, cfg, f_S)
        return Forward(pos, logits, f_S)
    if mode != "lbf":
        raise ValueError(f"unknown mode {mode!r}")
    f_prime = _take_targets(h_agent, batch.target_index)
    pooled = None
    if cfg.use_estimator:
        f_hat = estimate_behavior(P, cfg, f_base, base_valid, f_X)
        h_agent = fuse(P, cfg, h_agent, f_hat)
        pooled = dc.mean_pool(f_hat, axis=2)
    f_S = _take_targets(h_agent, batch.target_index)
    pos, logits = decode(P, cfg, f_S)
    return Forward(pos, logits, f_S, pooled, batch.agent_mask.copy(), f_prime)


# ---------------------------------------------------------------- losses


def winner_index(pos_local: np.ndarray, gt_local: np.ndarray) -> np.ndarray:
    fe = np.linalg.norm(pos_local[:, :, -1] - gt_local[:, None, -1], axis=-1)
    return np.argmin(fe, axis=1)


def loss_pred(fw_pos: Tensor, fw_logits: Tensor, gt_local: np.ndarray):
    """Winner-takes-all smooth-L1 on the best final-point mode + score cross-entropy."""
    win = winner_index(fw_pos.data, gt_local)
    B = len(win)
    best = dc.getitem(fw_pos, (np.arange(B), win))
    reg = dc.smooth_l1(best, gt_local)
    ce = dc.cross_entropy(fw_logits, win)
    return reg + ce, reg, ce, win


@dataclass
class KdFeaturePair:
    site: str
    F_s: Tensor
    F_t: np.ndarray
    valid: np.ndarray  # (rows,) which rows take part

    def __post_init__(self):
        if tuple(self.F_s.shape) != tuple(np.shape(self.F_t)):
            raise dc.ShapeMismatch(f"KD site {self.site}: {self.F_s.shape} vs {np.shape(self.F_t)}")


def loss_kd(pairs: list[KdFeaturePair], lambda_kd: float, eps_smooth: float = 1e-12,
            norm: str = "l2") -> Tensor:
    """lambda * sum over sites of the agent-averaged (smoothed) L2 norm of F_s - F_t."""
    total = Tensor(0.0)
    for pair in pairs:
        C = pair.F_s.shape[-1]
        fs = dc.reshape(pair.F_s, (-1, C))
        ft = np.asarray(pair.F_t).reshape(-1, C)
        w = np.asarray(pair.valid, dtype=np.float64).reshape(-1)
        n = w.sum()
        if n == 0:
            continue
        per = dc.l2_norm_loss(fs, ft, eps_smooth) if norm == "l2" else dc.squared_error_loss(fs, ft)
        total = total + dc.sum_(dc.mul(per, w / n))
    return dc.mul(total, float(lambda_kd))


def kd_pairs(student: Forward, teacher: Forward, kd_sites: int, use_estimator: bool = True) -> list[KdFeaturePair]:
    pairs = []
    if use_estimator and teacher.f_B_pooled is not None and student.f_B_pooled is not None:
        valid = teacher.f_B_valid & student.f_B_valid
        pairs.append(KdFeaturePair("fused_behavior", student.f_B_pooled, teacher.f_B_pooled.data, valid))
    if kd_sites == 2 or not pairs:
        pairs.append(KdFeaturePair("final_scene", student.f_S, teacher.f_S.data,
                                   np.ones(student.f_S.shape[0], dtype=bool)))
    return pairs


def predict_global(fw: Forward, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Back-transform mode trajectories to the global frame; scores via softmax."""
    pos = fw.pos.data  # (B, K, Tf, 2)
    glob = np.einsum("bktj,bjl->bktl", pos, batch.rot) + batch.origin[:, None, None, :]
    z = fw.logits.data - fw.logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return glob, e / e.sum(axis=1, keepdims=True)
