"""Graph Transformer Layer: neighbour-masked multi-head attention with an optional
edge channel, position-wise FFN and residual connections (no normalisation)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Support

STANDARD_PAIRINGS = {(4, 32), (8, 64), (8, 56)}


@dataclass(frozen=True)
class LayerConfig:
    num_heads: int = 4
    hidden_dim: int = 32
    use_edge_features: bool = False
    use_bias: bool = False
    include_self: bool = False
    residual: bool = True
    dropout: float = 0.0
    # >1 gives every hop ring its own Q/K/V projections (augmented k-hop)
    num_rings: int = 1
    strict: bool = False

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")
        if self.strict and (self.num_heads, self.hidden_dim) not in STANDARD_PAIRINGS:
            raise ValueError(f"(heads, dim)=({self.num_heads}, {self.hidden_dim}) "
                             f"not in {sorted(STANDARD_PAIRINGS)}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def head_blocks(d: int, num_heads: int) -> np.ndarray:
    """d x H indicator: column k sums the k-th head's d_k coordinates."""
    s = np.zeros((d, num_heads))
    s[np.arange(d), np.arange(d) // (d // num_heads)] = 1.0
    return s


def _seed_stream(rng: np.random.Generator):
    while True:
        yield int(rng.integers(0, 2**63 - 1))


def init_gtl_params(prefix: str, cfg: LayerConfig, rng: np.random.Generator) -> dict:
    d = cfg.hidden_dim
    seeds = _seed_stream(rng)
    p = {}

    def w(name, shape):
        t = ad.glorot_init(shape, next(seeds))
        t.name = f"{prefix}.{name}"
        p[t.name] = t

    def b(name, size):
        p[f"{prefix}.{name}"] = ad.param(np.zeros(size), name=f"{prefix}.{name}")

    rings = [""] if cfg.num_rings == 1 else [f".r{r}" for r in range(1, cfg.num_rings + 1)]
    for r in rings:
        for m in "QKV":
            w(m + r, (d, d))
    w("O_h", (d, d))
    w("ffn_h.W1", (d, 2 * d))
    w("ffn_h.W2", (2 * d, d))
    if cfg.use_bias:
        b("ffn_h.b1", 2 * d)
        b("ffn_h.b2", d)
    if cfg.use_edge_features:
        w("E", (d, d))
        w("O_e", (d, d))
        w("ffn_e.W1", (d, 2 * d))
        w("ffn_e.W2", (2 * d, d))
        if cfg.use_bias:
            b("ffn_e.b1", 2 * d)
            b("ffn_e.b2", d)
    return p


def _pair_projection(h: Tensor, params: dict, prefix: str, which: str, cfg: LayerConfig,
                     support: Support, side: np.ndarray) -> Tensor:
    """Project h with Q/K/V and pick rows for every support pair."""
    if cfg.num_rings == 1:
        return ad.gather_rows(ad.matmul(h, params[f"{prefix}.{which}"]), side)
    m = len(side)
    ring = np.maximum(support.ring, 1)  # self pairs share the first ring's networks
    out = None
    for r in range(1, cfg.num_rings + 1):
        sel = np.flatnonzero(ring == r)
        proj = ad.matmul(h, params[f"{prefix}.{which}.r{r}"])
        part = ad.scatter_add_rows(ad.gather_rows(proj, side[sel]), sel, m)
        out = part if out is None else ad.add(out, part)
    return out


def attention_scores(h: Tensor, e: Tensor | None, support: Support, params: dict,
                     prefix: str, cfg: LayerConfig):
    """Per-pair scores for all heads at once.

    Returns ``(components, scores)``: ``components`` is the m x d table of
    per-coordinate terms (q_u * k_v / sqrt(d_k), times E e_uv when the edge
    channel is on), ``scores`` is m x H, each head summing its d_k block.
    """
    q = _pair_projection(h, params, prefix, "Q", cfg, support, support.query)
    k = _pair_projection(h, params, prefix, "K", cfg, support, support.key)
    comp = ad.scale(ad.mul(q, k), 1.0 / math.sqrt(cfg.head_dim))
    if cfg.use_edge_features:
        if e is None:
            raise ValueError("edge channel enabled but no edge states given")
        comp = ad.mul(comp, ad.matmul(e, params[f"{prefix}.E"]))
    scores = ad.matmul(comp, Tensor(head_blocks(cfg.hidden_dim, cfg.num_heads)))
    return comp, scores


def _ffn(x: Tensor, params: dict, prefix: str, cfg: LayerConfig, rng) -> Tensor:
    hid = ad.matmul(x, params[f"{prefix}.W1"])
    if cfg.use_bias:
        hid = ad.add(hid, params[f"{prefix}.b1"])
    hid = ad.dropout(ad.relu(hid), cfg.dropout, rng)
    out = ad.matmul(hid, params[f"{prefix}.W2"])
    if cfg.use_bias:
        out = ad.add(out, params[f"{prefix}.b2"])
    return out


def gtl_forward(h: Tensor, e: Tensor | None, support: Support, params: dict, prefix: str,
                cfg: LayerConfig, rng: np.random.Generator | None = None):
    """One GTL layer. Returns ``(h_next, e_next)``; ``e_next`` is None without edges."""
    d = cfg.hidden_dim
    if h.shape != (support.num_nodes, d):
        raise ad.ShapeError(f"gtl_forward: h has shape {h.shape}, "
                            f"expected ({support.num_nodes}, {d})")
    n = support.num_nodes
    comp, scores = attention_scores(h, e, support, params, prefix, cfg)
    w = ad.segment_softmax(scores, support.query, n)
    w = ad.dropout(w, cfg.dropout, rng)
    v = _pair_projection(h, params, prefix, "V", cfg, support, support.key)
    w_full = ad.matmul(w, Tensor(head_blocks(d, cfg.num_heads).T))
    msg = ad.scatter_add_rows(ad.mul(w_full, v), support.query, n)
    attn = ad.matmul(msg, params[f"{prefix}.O_h"])
    h1 = ad.add(h, attn) if cfg.residual else attn
    f = _ffn(h1, params, f"{prefix}.ffn_h", cfg, rng)
    h2 = ad.add(h1, f) if cfg.residual else f

    e2 = None
    if cfg.use_edge_features:
        ehat = ad.matmul(comp, params[f"{prefix}.O_e"])
        e1 = ad.add(e, ehat) if cfg.residual else ehat
        fe = _ffn(e1, params, f"{prefix}.ffn_e", cfg, rng)
        e2 = ad.add(e1, fe) if cfg.residual else fe
    return h2, e2


def attention_weights(h: Tensor, e: Tensor | None, support: Support, params: dict,
                      prefix: str, cfg: LayerConfig) -> np.ndarray:
    """Softmax weights (m x H) without recording, for inspection."""
    _, scores = attention_scores(h, e, support, params, prefix, cfg)
    return ad.segment_softmax(scores, support.query, support.num_nodes).data


def readout(h: Tensor, graph_id, num_graphs: int, mode: str = "sum") -> Tensor:
    graph_id = np.asarray(graph_id, dtype=np.int64)
    if mode == "sum":
        return ad.scatter_add_rows(h, graph_id, num_graphs)
    if mode == "mean":
        counts = np.bincount(graph_id, minlength=num_graphs).astype(np.float64)
        inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
        return ad.row_scale(ad.scatter_add_rows(h, graph_id, num_graphs), inv)
    if mode == "max":
        return ad.segment_max(h, graph_id, num_graphs)
    raise ValueError(f"unknown readout {mode!r}")
