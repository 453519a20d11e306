"""Dense float64 tensors with a recorded tape for reverse-mode differentiation.

Ops record onto the innermost active :class:`Tape` whenever one of their
inputs requires a gradient. Outside a tape every op is a plain numpy
evaluation, which is what inference and finite differences use.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._op = None  # producing op name; None for leaves

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass(eq=False)
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


_active: list["Tape"] = []


class Tape:
    """Topologically ordered list of op records (append order is execution order)."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()
        return False

    def __len__(self):
        return len(self.records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out`` as the result of ``op`` and record it.

    ``vjp(g)`` maps the output cotangent to one cotangent per input
    (``None`` for inputs that need none).
    """
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op}: non-finite output")
    res = Tensor.__new__(Tensor)
    res.data = out
    res.name = None
    res._op = None
    res.requires_grad = False
    if _active and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        rec = _Record(op, tuple(inputs), res, vjp)
        res._op = op  # a name, not the record, so no reference cycle
        _active[-1].records.append(rec)
    return res


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# below this many entries np.add.at beats building a sparse matrix
_SPARSE_MIN = 4096


def segment_sum(values: np.ndarray, idx: np.ndarray, num_rows: int) -> np.ndarray:
    """Row-wise ``out[idx[j]] += values[j]`` (deterministic, column order per row)."""
    m = len(idx)
    flat = values.reshape(m, int(np.prod(values.shape[1:], dtype=np.int64)))
    if flat.size < _SPARSE_MIN:
        out = np.zeros((num_rows, flat.shape[1]))
        np.add.at(out, idx, flat)
    else:
        ind = sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(num_rows, m))
        out = np.asarray(ind @ flat)
    return out.reshape((num_rows,) + values.shape[1:])


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- primitive ops -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return make_op("matmul", ad @ bd, (a, b),
                   lambda g: (g @ bd.T if ra else None, ad.T @ g if rb else None))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return make_op("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape) if ra else None,
                              _unbroadcast(g * ad, bd.shape) if rb else None))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op("scale", a.data * c, (a,), lambda g: (g * c,))


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    lead = {p.shape[:-1] for p in parts}
    if len(lead) != 1:
        raise ShapeError(f"concat_last_dim: incompatible shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=-1)
    return make_op("concat_last_dim", out, parts,
                   lambda g: tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sum_rows(a: Tensor) -> Tensor:
    n = a.shape[0]
    return make_op("sum_rows", a.data.sum(axis=0, keepdims=True), (a,),
                   lambda g: (np.repeat(g, n, axis=0),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op("sum_all", np.sum(a.data), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, max(a.data.size, 1)
    return make_op("mean_all", np.mean(a.data) if a.data.size else 0.0, (a,),
                   lambda g: (np.full(shape, float(g) / n),))


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {a.shape}")
    shape = a.shape

    def vjp(g):
        return (segment_sum(g, idx, shape[0]),)

    return make_op("gather_rows", a.data[idx], (a,), vjp)


def scatter_add_rows(a: Tensor, idx, num_rows: int) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) != a.shape[0]:
        raise ShapeError(f"scatter_add_rows: {len(idx)} indices for {a.shape[0]} rows")
    out = segment_sum(a.data, idx, num_rows)
    return make_op("scatter_add_rows", out, (a,), lambda g: (g[idx],))


def masked_row_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax over the unmasked entries of each row; masked entries are 0.

    A row without unmasked entries comes out as all zeros.
    """
    scores = _as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ShapeError(f"masked_row_softmax: mask {mask.shape} vs scores {scores.shape}")
    s = np.where(mask, scores.data, -np.inf)
    rowmax = np.max(s, axis=-1, keepdims=True, initial=-np.inf)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    ex = np.where(mask, np.exp(np.where(mask, scores.data, 0.0) - rowmax), 0.0)
    den = ex.sum(axis=-1, keepdims=True)
    p = np.divide(ex, den, out=np.zeros_like(ex), where=den > 0)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return make_op("masked_row_softmax", p, (scores,), vjp)


def segment_softmax(scores: Tensor, segment, num_segments: int) -> Tensor:
    """Softmax of each column over rows sharing a segment id.

    The sparse counterpart of :func:`masked_row_softmax` for edge lists:
    row ``j`` of ``scores`` belongs to segment ``segment[j]``.
    """
    seg = np.asarray(segment, dtype=np.int64)
    x = scores.data
    smax = np.full((num_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(smax, seg, x)
    ex = np.exp(x - smax[seg])
    p = ex / segment_sum(ex, seg, num_segments)[seg]

    def vjp(g):
        return (p * (g - segment_sum(g * p, seg, num_segments)[seg]),)

    return make_op("segment_softmax", p, (scores,), vjp)


def segment_max(a: Tensor, segment, num_segments: int) -> Tensor:
    """Column-wise max per segment; empty segments give 0. Ties route the gradient to the first row."""
    seg = np.asarray(segment, dtype=np.int64)
    x = a.data
    out = np.full((num_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(out, seg, x)
    out = np.where(np.isfinite(out), out, 0.0)
    hit = x == out[seg]
    # first winning row per (segment, column)
    first = np.zeros_like(hit)
    taken = np.zeros(out.shape, dtype=bool)
    for j in range(len(seg)):
        row = hit[j] & ~taken[seg[j]]
        first[j] = row
        taken[seg[j]] |= row
    return make_op("segment_max", out, (a,), lambda g: (g[seg] * first,))


def row_scale(a: Tensor, w) -> Tensor:
    """Multiply row i of ``a`` by the constant ``w[i]``."""
    w = np.asarray(w, dtype=np.float64).reshape(-1, *([1] * (a.data.ndim - 1)))
    return make_op("row_scale", a.data * w, (a,), lambda g: (g * w,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return make_op("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# -- losses ----------------------------------------------------------------------

def l1_loss(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - t
    n = max(diff.size, 1)
    return make_op("l1_loss", np.abs(diff).mean(), (pred,), lambda g: (float(g) * np.sign(diff) / n,))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    y = np.asarray(target, dtype=np.float64).reshape(logits.shape)
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = max(z.size, 1)
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return make_op("bce_with_logits", loss.mean(), (logits,), lambda g: (float(g) * (sig - y) / n,))


def weighted_cross_entropy(logits: Tensor, labels, class_weight=None) -> Tensor:
    """Mean of w[y_i] * CE_i divided by the sum of weights (torch convention)."""
    y = np.asarray(labels, dtype=np.int64)
    z = logits.data
    n, c = z.shape
    w = np.ones(c) if class_weight is None else np.asarray(class_weight, dtype=np.float64)
    zmax = z.max(axis=1, keepdims=True)
    logz = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    nll = logz - z[np.arange(n), y]
    wi = w[y]
    wsum = wi.sum()
    prob = np.exp(z - logz[:, None])

    def vjp(g):
        d = prob.copy()
        d[np.arange(n), y] -= 1.0
        return (float(g) * d * (wi / wsum)[:, None],)

    return make_op("weighted_cross_entropy", np.sum(wi * nll) / wsum, (logits,), vjp)


# -- backward ---------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict:
    """Gradients of scalar ``loss`` for every differentiable leaf on ``tape``.

    Returns a dict keyed by leaf tensor. Leaves listed in ``wrt`` that the
    loss does not reach get zero arrays.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and t._op is None:
                leaves.setdefault(id(t), t)
    if loss.requires_grad and loss._op is None:
        leaves.setdefault(id(loss), loss)
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
    out = {}
    for key, t in leaves.items():
        g = grads.get(key)
        out[t] = np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64).reshape(t.shape)
    for t in wrt or ():
        if t not in out:
            g = grads.get(id(t))
            out[t] = np.zeros_like(t.data) if g is None else np.array(g).reshape(t.shape)
    return out


def finite_diff_gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|, |numeric|)."""
    with Tape() as tape:
        y = f(x)
    analytic = backward(tape, y, wrt=[x])[x].reshape(-1)
    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise ValueError("gradcheck needs a contiguous tensor")
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError("gradcheck: non-finite evaluation")
        a = analytic[i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


def gradcheck_all(f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Gradcheck a closure over several parameter tensors; worst error wins."""
    return max((finite_diff_gradcheck(lambda _: f(), t, h) for t in tensors), default=0.0)


# -- init / optimiser / checkpoint -------------------------------------------------

def glorot_bound(shape) -> float:
    fan_in, fan_out = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot_init(shape, seed) -> Tensor:
    if len(shape) != 2:
        raise ShapeError(f"glorot_init expects a 2-d shape, got {shape}")
    b = glorot_bound(shape)
    rng = np.random.default_rng(seed)
    return param(rng.uniform(-b, b, size=tuple(shape)))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One Adam update (L2 weight decay folded into the gradient), in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape} for {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


CHECKPOINT_FORMAT = "sea-params"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {k: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
                   for k, p in params.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
    params = {}
    for k, rec in doc["params"].items():
        params[k] = param(np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"]), name=k)
    return params, doc.get("meta", {})
