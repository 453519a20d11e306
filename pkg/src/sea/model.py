"""Shell attention: experts over graph shells, hard single-expert routing, full forward."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphBatch, Support, batch_support
from .gtl import LayerConfig, gtl_forward, init_gtl_params, readout
from .spectral import lpe

VARIANTS = ("SEA_GNN", "SEA_AGGREGATED", "SEA_KHOP")
TASKS = ("graph_regression", "graph_binary", "node_classification")
AGGREGATORS = ("sum", "mean", "max")


@dataclass(frozen=True)
class SeaConfig:
    variant: str = "SEA_GNN"
    num_experts: int = 4
    khop: int = 2
    augmented: bool = False
    aggregate: str = "sum"
    aggregate_mu: str = "mean"
    task: str = "graph_regression"
    num_heads: int = 4
    hidden_dim: int = 32
    lpe_dim: int = 8
    use_lpe: bool = True
    lpe_skip_trivial: bool = False
    use_edge_features: bool = False
    use_bias: bool = False
    include_self: bool = False
    residual: bool = True
    readout: str = "sum"
    dropout: float = 0.0
    # input encoders: token vocabularies (>0) or dense input widths (>0)
    node_vocab: int = 0
    node_in_dim: int = 0
    edge_vocab: int = 0
    edge_in_dim: int = 0
    num_classes: int = 2
    epsilon0: float = 0.5
    epsilon_decay: float = 0.9
    epsilon_floor: float = 0.0
    strict: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.num_experts < 1 or self.khop < 1:
            raise ValueError("need num_experts >= 1 and khop >= 1")
        if self.aggregate not in AGGREGATORS or self.aggregate_mu not in AGGREGATORS:
            raise ValueError(f"aggregators must be in {AGGREGATORS}")
        if (self.node_vocab > 0) == (self.node_in_dim > 0):
            raise ValueError("set exactly one of node_vocab / node_in_dim")
        if self.task == "node_classification" and self.num_classes < 2:
            raise ValueError("node classification needs num_classes >= 2")
        if not 0.0 <= self.epsilon_floor <= 1.0 or not 0.0 <= self.epsilon0 <= 1.0:
            raise ValueError("epsilon values must lie in [0, 1]")
        self.layer_config()  # validates heads/dim

    @property
    def support_k(self) -> int:
        return self.khop if self.variant == "SEA_KHOP" else 1

    @property
    def trunk_depth(self) -> int:
        return 1 if self.variant == "SEA_AGGREGATED" else self.num_experts

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "node_classification" else 1

    def layer_config(self) -> LayerConfig:
        rings = self.khop if (self.variant == "SEA_KHOP" and self.augmented) else 1
        return LayerConfig(num_heads=self.num_heads, hidden_dim=self.hidden_dim,
                           use_edge_features=self.use_edge_features, use_bias=self.use_bias,
                           include_self=self.include_self, residual=self.residual,
                           dropout=self.dropout, num_rings=rings, strict=self.strict)

    def epsilon(self, epoch: int) -> float:
        return max(self.epsilon_floor, self.epsilon0 * self.epsilon_decay ** epoch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SeaConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SeaModel:
    config: SeaConfig
    params: dict


@dataclass(frozen=True)
class RoutingDecision:
    probs: np.ndarray     # n x N
    choice: np.ndarray    # n
    explored: np.ndarray  # n, bool


def build_model(config: SeaConfig, seed: int = 0) -> SeaModel:
    rng = np.random.default_rng(seed)
    d = config.hidden_dim
    p: dict = {}

    def w(name, shape):
        t = ad.glorot_init(shape, int(rng.integers(0, 2**63 - 1)))
        t.name = name
        p[name] = t

    def zeros(name, size):
        p[name] = ad.param(np.zeros(size), name=name)

    if config.node_vocab:
        w("embed.node", (config.node_vocab, d))
    else:
        w("embed.node_W", (config.node_in_dim, d))
    if config.use_lpe:
        w("embed.lpe", (config.lpe_dim, d))
    if config.use_edge_features:
        if config.edge_in_dim:
            w("embed.edge_W", (config.edge_in_dim, d))
        else:
            w("embed.edge", (max(config.edge_vocab, 1), d))
        # self pairs (ring 0) and virtual k-hop pairs (ring >= 2) have no real edge
        w("embed.ring", (config.support_k + 1, d))
    lcfg = config.layer_config()
    for layer in range(1, config.trunk_depth + 1):
        p.update(init_gtl_params(f"gtl{layer}", lcfg, rng))
    w("router.W", (d, config.num_experts))
    for i in range(config.num_experts):
        w(f"expert{i}.W", (d, d))
        zeros(f"expert{i}.b", d)
    w("head.W", (d, config.out_dim))
    zeros("head.b", config.out_dim)
    return SeaModel(config, p)


# -- routing -------------------------------------------------------------------------

def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def route(h0, router_w, epsilon: float = 0.0, seed: int = 0, keys=None) -> RoutingDecision:
    """Softmax router with epsilon-greedy exploration.

    Exploration draws for node j come from a generator keyed by
    ``(seed, keys[j])`` and consumed in node order, so the outcome does not
    depend on how graphs are grouped into batches.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    h0 = h0.data if isinstance(h0, Tensor) else np.asarray(h0, dtype=np.float64)
    router_w = router_w.data if isinstance(router_w, Tensor) else np.asarray(router_w)
    probs = _softmax_rows(h0 @ router_w)
    choice = np.argmax(probs, axis=1)
    explored = np.zeros(len(choice), dtype=bool)
    if epsilon > 0.0 and len(choice):
        n_exp = router_w.shape[1]
        keys = np.zeros(len(choice), np.int64) if keys is None else np.asarray(keys, np.int64)
        choice = choice.copy()
        for key in np.unique(keys):
            idx = np.flatnonzero(keys == key)
            rng = np.random.default_rng([int(seed) & (2**63 - 1), int(key)])
            u = rng.random(len(idx))
            pick = rng.integers(0, n_exp, size=len(idx))
            hit = u < epsilon
            explored[idx[hit]] = True
            choice[idx[hit]] = pick[hit]
    return RoutingDecision(probs, choice, explored)


def expert_transform(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


# -- inputs ----------------------------------------------------------------------------

def embed_nodes(b: GraphBatch, model: SeaModel) -> Tensor:
    cfg, p = model.config, model.params
    g = b.graph
    if cfg.node_vocab:
        if not g.uses_tokens:
            raise ValueError("model expects token node features")
        if g.num_nodes and g.node_feat.max() >= cfg.node_vocab:
            raise ValueError(f"node token {g.node_feat.max()} outside vocab {cfg.node_vocab}")
        h = ad.gather_rows(p["embed.node"], g.node_feat)
    else:
        if g.feature_dim != cfg.node_in_dim:
            raise ValueError(f"node features have dim {g.feature_dim}, model expects {cfg.node_in_dim}")
        h = ad.matmul(Tensor(g.node_feat), p["embed.node_W"])
    if cfg.use_lpe:
        pe = np.concatenate([lpe(gr, cfg.lpe_dim, cfg.lpe_skip_trivial) for gr in b.graphs])
        h = ad.add(h, ad.matmul(Tensor(pe), p["embed.lpe"]))
    return h


def embed_pairs(b: GraphBatch, support: Support, model: SeaModel) -> Tensor | None:
    cfg, p = model.config, model.params
    if not cfg.use_edge_features:
        return None
    m = len(support.query)
    real = np.flatnonzero(support.edge_slot >= 0)
    virt = np.flatnonzero(support.edge_slot < 0)
    ef = b.graph.edge_feat
    if cfg.edge_in_dim:
        feats = np.zeros((len(real), cfg.edge_in_dim)) if ef is None else \
            np.asarray(ef, dtype=np.float64).reshape(len(ef), -1)[support.edge_slot[real]]
        real_emb = ad.matmul(Tensor(feats), p["embed.edge_W"])
    else:
        tok = np.zeros(len(real), np.int64) if ef is None else \
            np.asarray(ef, dtype=np.int64)[support.edge_slot[real]]
        real_emb = ad.gather_rows(p["embed.edge"], tok)
    e = ad.scatter_add_rows(real_emb, real, m)
    if len(virt):
        ring_emb = ad.gather_rows(p["embed.ring"], support.ring[virt])
        e = ad.add(e, ad.scatter_add_rows(ring_emb, virt, m))
    return e


def _aggregate(h: Tensor, support: Support, how: str) -> Tensor:
    n = support.num_nodes
    msgs = ad.gather_rows(h, support.key)
    if how == "max":
        return ad.segment_max(msgs, support.query, n)
    total = ad.scatter_add_rows(msgs, support.query, n)
    if how == "sum":
        return total
    deg = np.bincount(support.query, minlength=n).astype(np.float64)
    return ad.row_scale(total, np.divide(1.0, deg, out=np.zeros(n), where=deg > 0))


# -- expert state tables ----------------------------------------------------------------

def sea_gnn_expert_states(h0, e0, support: Support, model: SeaModel, rng=None) -> list:
    """Expert i reads the output of trunk layer i (receptive field: i hops)."""
    lcfg = model.config.layer_config()
    out, h, e = [], h0, e0
    for layer in range(1, model.config.trunk_depth + 1):
        h, e = gtl_forward(h, e, support, model.params, f"gtl{layer}", lcfg, rng)
        out.append(h)
    return out


# widened support is the only difference; the layer stack is shared
sea_khop_expert_states = sea_gnn_expert_states


def sea_aggregated_expert_states(h0, e0, support: Support, model: SeaModel, rng=None) -> list:
    """First expert: one GTL layer. Later experts: neighbours' aggregated messages,
    combined again over the neighbourhood (Aggregate then Aggregate_mu)."""
    cfg = model.config
    h, _ = gtl_forward(h0, e0, support, model.params, "gtl1", cfg.layer_config(), rng)
    out = [h]
    nbrs = support
    if cfg.include_self:
        keep = support.ring > 0
        nbrs = Support(support.query[keep], support.key[keep], support.ring[keep],
                       support.edge_slot[keep], support.num_nodes)
    for _ in range(2, cfg.num_experts + 1):
        m = _aggregate(h, nbrs, cfg.aggregate)
        h = _aggregate(m, nbrs, cfg.aggregate_mu)
        out.append(h)
    return out


def expert_states(b: GraphBatch, model: SeaModel, rng=None):
    """Returns ``(h0, tables)`` where ``tables[i]`` feeds expert ``i``."""
    cfg = model.config
    h0 = embed_nodes(b, model)
    support = batch_support(b, cfg.support_k, cfg.include_self)
    e0 = embed_pairs(b, support, model)
    if cfg.variant == "SEA_AGGREGATED":
        tables = sea_aggregated_expert_states(h0, e0, support, model, rng)
    else:
        tables = sea_gnn_expert_states(h0, e0, support, model, rng)
    return h0, tables


def model_forward(b: GraphBatch, model: SeaModel, config: SeaConfig | None = None,
                  epsilon: float = 0.0, seed: int = 0, routing: RoutingDecision | None = None,
                  rng: np.random.Generator | None = None):
    """Predictions and routing decisions for a batch.

    Graph tasks return a (num_graphs, 1) tensor, node classification returns
    (num_nodes, num_classes) logits. Passing ``routing`` pins the expert choice.
    """
    if config is not None and config != model.config:
        raise ValueError("config/model mismatch")
    cfg, p = model.config, model.params
    if cfg.task == "node_classification" and b.graph.y_node is None and b.graphs[0].y_graph is not None:
        raise ValueError("node task on a graph-level dataset")
    h0, tables = expert_states(b, model, rng)
    if routing is None:
        routing = route(h0.data, p["router.W"].data, epsilon, seed, keys=b.keys[b.graph_id])
    n = b.graph.num_nodes
    out = None
    for i in range(cfg.num_experts):
        sel = np.flatnonzero(routing.choice == i)
        if not len(sel):
            continue
        hi = expert_transform(ad.gather_rows(tables[i], sel), p[f"expert{i}.W"], p[f"expert{i}.b"])
        part = ad.scatter_add_rows(hi, sel, n)
        out = part if out is None else ad.add(out, part)
    if out is None:
        out = Tensor(np.zeros((n, cfg.hidden_dim)))
    if cfg.task == "node_classification":
        pred = ad.add(ad.matmul(out, p["head.W"]), p["head.b"])
    else:
        g = readout(out, b.graph_id, b.num_graphs, cfg.readout)
        pred = ad.add(ad.matmul(g, p["head.W"]), p["head.b"])
    return pred, routing


def trunk_states(b: GraphBatch, model: SeaModel) -> list[np.ndarray]:
    """Layer-by-layer node states, input embedding first."""
    h0, tables = expert_states(b, model)
    return [h0.data] + [t.data for t in tables]
