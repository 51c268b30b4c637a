"""Minimal reverse-mode autodiff over float64 numpy arrays.

Values are computed eagerly. While a :class:`Tape` is active, every op whose
inputs require gradients appends a node (output tensor + backward closure);
:func:`backward` walks the tape in reverse. Outside a tape ops are plain
numpy computations, which is what finite-difference checks use.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple = ()
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


class Tape:
    """Records op nodes for one forward pass."""

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._active[-1] if cls._active else None


@contextmanager
def no_tape():
    saved = Tape._active
    Tape._active = []
    try:
        yield
    finally:
        Tape._active = saved


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue(f"{op} produced a non-finite value")
    return out


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(_check(data, op))
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse-mode sweep; leaves gradients in ``.grad`` of every leaf that requires them."""
    if loss.data.size != 1:
        raise ShapeMismatch("backward needs a scalar loss")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    leaves = {id(p): p for node in tape.nodes for p in node._parents if p._backward is None}
    for p in leaves.values():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient for {p.name or 'leaf'}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def bw(g):
        _accum(x, g * pos)

    return _make(np.where(pos, x.data, 0.0), (x,), bw, "relu")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def bw(g):
        _accum(x, g * 0.5 / out)

    return _make(out, (x,), bw, "sqrt")


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                _accum(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"linear: input width {x.shape[-1]} vs weight {W.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ W.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeMismatch(f"linear: bias {b.shape} vs weight {W.shape}")
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (W.shape[1],))
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        if x.requires_grad:
            _accum(x, (g2 @ W.data.T).reshape(x.shape))
        if W.requires_grad:
            _accum(W, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _make(out, parents, bw, "linear")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) for p in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(x, full)

    return _make(x.data[idx], (x,), bw, "getitem")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            _accum(x, part)

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def cumsum(x, axis: int) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return _make(np.cumsum(x.data, axis=axis), (x,), bw, "cumsum")


def mean_pool(x, axis: int, mask=None) -> Tensor:
    """Mean over ``axis`` restricted to ``mask`` (same shape as x without the last axis).

    Groups with no unmasked element pool to zeros.
    """
    x = as_tensor(x)
    if mask is None:
        return mean(x, axis)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:-1]:
        raise ShapeMismatch(f"mean_pool mask {m.shape} vs {x.shape}")
    ax = axis % x.ndim
    cnt = m.sum(axis=ax)
    w = m / np.expand_dims(np.where(cnt > 0, cnt, 1.0), ax)
    wx = w[..., None]

    def bw(g):
        _accum(x, np.expand_dims(g, ax) * wx)

    return _make((x.data * wx).sum(axis=ax), (x,), bw, "mean_pool")


# ---------------------------------------------------------------- normalisation / attention


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data
        parents.append(beta)

    def bw(g):
        if gamma is not None:
            _accum(gamma, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
            gx = g * gamma.data
        else:
            gx = g
        if beta is not None:
            _accum(beta, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gm = gx.mean(axis=-1, keepdims=True)
            gxm = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx - gm - xhat * gxm))

    return _make(out, parents, bw, "layer_norm")


def _masked_exp(scores: list[np.ndarray], masks: list[np.ndarray]):
    neg = -np.inf
    row_max = None
    for s, m in zip(scores, masks):
        mx = np.where(m, s, neg).max(axis=-1, keepdims=True) if s.shape[-1] else np.full(s.shape[:-1] + (1,), neg)
        row_max = mx if row_max is None else np.maximum(row_max, mx)
    safe = np.where(np.isfinite(row_max), row_max, 0.0)
    exps = [np.where(m, np.exp(np.where(m, s, 0.0) - safe), 0.0) for s, m in zip(scores, masks)]
    denom = None
    for e in exps:
        d = e.sum(axis=-1, keepdims=True)
        denom = d if denom is None else denom + d
    scale = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), 0.0)
    return [e * scale for e in exps]


def softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis; masked-out entries get 0, fully masked rows are all 0."""
    x = as_tensor(x)
    m = np.ones(x.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    (p,) = _masked_exp([x.data], [m])

    def bw(g):
        _accum(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (x,), bw, "softmax")


def scaled_dot_attention(q, k, v, mask=None) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` with boolean key masks.

    ``k``, ``v`` and ``mask`` may be lists of key groups. The groups share one
    softmax but each group's weighted sum is formed separately and then added,
    so a fully masked group contributes an exact zero: results are bit-identical
    to omitting that group. Rows with no unmasked key return zeros.
    """
    q = as_tensor(q)
    grouped = isinstance(k, (list, tuple))
    ks = [as_tensor(t) for t in (k if grouped else [k])]
    vs = [as_tensor(t) for t in (v if grouped else [v])]
    if mask is None:
        masks = [None] * len(ks)
    else:
        masks = list(mask) if grouped else [mask]
    if not (len(ks) == len(vs) == len(masks)):
        raise ShapeMismatch("attention: k, v and mask group counts differ")
    d = q.shape[-1]
    scale = 1.0 / np.sqrt(d)
    scores, mks = [], []
    for kk, vv, mm in zip(ks, vs, masks):
        if kk.shape[-1] != d or kk.shape[-2] != vv.shape[-2]:
            raise ShapeMismatch(f"attention: q {q.shape}, k {kk.shape}, v {vv.shape}")
        s = (q.data @ np.swapaxes(kk.data, -1, -2)) * scale
        mks.append(np.ones(s.shape, dtype=bool) if mm is None
                   else np.broadcast_to(np.asarray(mm, dtype=bool), s.shape))
        scores.append(s)
    probs = _masked_exp(scores, mks)
    out = None
    for p, vv in zip(probs, vs):
        part = p @ vv.data
        out = part if out is None else out + part

    def bw(g):
        dps = [g @ np.swapaxes(vv.data, -1, -2) for vv in vs]
        inner = None
        for p, dp in zip(probs, dps):
            t = (p * dp).sum(axis=-1, keepdims=True)
            inner = t if inner is None else inner + t
        gq = None
        for p, dp, kk, vv in zip(probs, dps, ks, vs):
            ds = p * (dp - inner) * scale
            if vv.requires_grad:
                _accum(vv, np.swapaxes(p, -1, -2) @ g)
            if kk.requires_grad:
                _accum(kk, np.swapaxes(ds, -1, -2) @ q.data)
            if q.requires_grad:
                t = ds @ kk.data
                gq = t if gq is None else gq + t
        if gq is not None:
            _accum(q, gq)

    return _make(out, [q, *ks, *vs], bw, "attention")


# ---------------------------------------------------------------- losses


def smooth_l1(pred, target, beta: float = 1.0, reduce: str | None = "mean") -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"smooth_l1 {pred.shape} vs {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    small = ad < beta
    q = np.minimum(ad, beta)  # keeps the unused quadratic branch from overflowing
    val = np.where(small, 0.5 * q * q / beta, ad - 0.5 * beta)
    dval = np.where(small, d / beta, np.sign(d))
    if reduce is None:
        def bw(g):
            _accum(pred, g * dval)
        return _make(val, (pred,), bw, "smooth_l1")
    n = val.size

    def bw_mean(g):
        _accum(pred, g * dval / n)

    return _make(np.asarray(val.mean()), (pred,), bw_mean, "smooth_l1")


def cross_entropy(logits, label, reduce: str | None = "mean") -> Tensor:
    """Negative log-likelihood of integer ``label`` under softmax(logits) (last axis)."""
    logits = as_tensor(logits)
    label = np.asarray(label, dtype=np.int64)
    if label.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"cross_entropy labels {label.shape} vs logits {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, label[..., None], axis=-1)[..., 0]
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, label[..., None], 1.0, axis=-1)
    if reduce is None:
        def bw(g):
            _accum(logits, g[..., None] * (p - onehot))
        return _make(nll, (logits,), bw, "cross_entropy")
    n = nll.size

    def bw_mean(g):
        _accum(logits, g * (p - onehot) / n)

    return _make(np.asarray(nll.mean()), (logits,), bw_mean, "cross_entropy")


def l2_norm_loss(a, b, eps_smooth: float = 1e-12) -> Tensor:
    """Smoothed Euclidean norm of ``a - b`` over the last axis: ``sqrt(sum d^2 + eps)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"l2_norm_loss {a.shape} vs {b.shape}")
    d = a.data - b.data
    out = np.sqrt((d * d).sum(axis=-1) + eps_smooth)

    def bw(g):
        gd = (g / out)[..., None] * d
        _accum(a, gd)
        _accum(b, -gd)

    return _make(out, (a, b), bw, "l2_norm_loss")


def squared_error_loss(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"squared_error_loss {a.shape} vs {b.shape}")
    d = a.data - b.data

    def bw(g):
        gd = 2.0 * g[..., None] * d
        _accum(a, gd)
        _accum(b, -gd)

    return _make((d * d).sum(axis=-1), (a, b), bw, "squared_error_loss")


# ---------------------------------------------------------------- parameters / optimiser


class ParamStore:
    """Named float64 parameters plus Adam moments, iterated in sorted-name order."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.meta: dict = {}
        self._rng = np.random.default_rng(seed)

    def names(self) -> list[str]:
        return sorted(self.params)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> np.ndarray:
        return self.params[name]

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = np.array(value, dtype=np.float64)
        return self.params[name]

    def glorot(self, name: str, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
        lim = gain * np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self._rng.uniform(-lim, lim, size=(fan_in, fan_out)))

    def zeros(self, name: str, *shape) -> np.ndarray:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, *shape) -> np.ndarray:
        return self.add(name, np.ones(shape))

    def normal(self, name: str, *shape, sd: float = 0.02) -> np.ndarray:
        return self.add(name, self._rng.normal(0.0, sd, size=shape))

    def bind(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {n: Tensor(self.params[n], requires_grad=requires_grad, name=n) for n in self.names()}

    def n_values(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        out.meta = json.loads(json.dumps(self.meta))
        return out


def collect_grads(bound: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in bound.items()}


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    missing = set(store.params) - set(grads)
    if missing:
        raise KeyError(f"missing gradients for {sorted(missing)}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in store.names():
        g = grads[name]
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(g)
            store.v[name] = np.zeros_like(g)
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


_MAGIC = b"LBPARAM1"


def save_params(store: ParamStore, path) -> None:
    """Named-tensor file: per entry (name, shape, raw little-endian float64)."""
    entries = [(n, store.params[n]) for n in store.names()]
    entries += [(f"__adam_m__/{n}", store.m[n]) for n in sorted(store.m)]
    entries += [(f"__adam_v__/{n}", store.v[n]) for n in sorted(store.v)]
    meta = json.dumps({"seed": store.seed, "step": store.step, "meta": store.meta},
                      sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<Q", len(entries)))
        for name, arr in entries:
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> ParamStore:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a parameter file")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        head = json.loads(fh.read(mlen))
        store = ParamStore(head["seed"])
        store.step = head["step"]
        store.meta = head["meta"]
        (n,) = struct.unpack("<Q", fh.read(8))
        for _ in range(n):
            (nl,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nl).decode()
            (nd,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{nd}Q", fh.read(8 * nd)) if nd else ()
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
            if name.startswith("__adam_m__/"):
                store.m[name.split("/", 1)[1]] = arr
            elif name.startswith("__adam_v__/"):
                store.v[name.split("/", 1)[1]] = arr
            else:
                store.params[name] = arr
    return store


# ---------------------------------------------------------------- gradient checking


def grad_check(fn: Callable[[dict], Tensor], inputs: dict[str, np.ndarray], h: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a dict of tensors to a scalar tensor. ``max_coords`` limits the
    number of coordinates probed per input (sampled with ``rng``).
    """
    rng = rng or np.random.default_rng(0)
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    with Tape() as tape:
        bound = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
        loss = fn(bound)
    backward(tape, loss)
    worst = 0.0
    for k, arr in base.items():
        analytic = bound[k].grad if bound[k].grad is not None else np.zeros_like(arr)
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat_idx = rng.choice(arr.size, size=max_coords, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape) if arr.ndim else ()
            vals = []
            for sgn in (1.0, -1.0):
                probe = {kk: vv for kk, vv in base.items()}
                pert = arr.copy()
                pert[idx] += sgn * h
                probe[k] = pert
                with no_tape():
                    vals.append(float(fn({kk: Tensor(vv) for kk, vv in probe.items()}).data))
            num = (vals[0] - vals[1]) / (2 * h)
            a = float(analytic[idx])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst
