"""Graph storage, k-hop shells, SBM generation, JSONL ingestion and batching."""
from __future__ import annotations

import json
import weakref
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class GraphError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph in CSR form.

    Every undirected edge is stored twice in ``indices`` (once per endpoint),
    neighbour lists are sorted ascending. ``edge_feat`` (when present) is
    aligned with ``indices``, i.e. one row per directed slot.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    node_feat: np.ndarray
    edge_feat: np.ndarray | None = None
    y_graph: float | None = None
    y_node: np.ndarray | None = None

    @classmethod
    def from_edges(cls, num_nodes, edges, node_feat=None, edge_feat=None,
                   y_graph=None, y_node=None) -> "Graph":
        n = int(num_nodes)
        if n < 0:
            raise GraphError("num_nodes must be non-negative")
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise GraphError("node index out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise GraphError("self-loops are not allowed")
        lo = np.minimum(e[:, 0], e[:, 1])
        hi = np.maximum(e[:, 0], e[:, 1])
        key = lo * max(n, 1) + hi
        if len(np.unique(key)) != len(key):
            raise GraphError("duplicate edge")

        ef = None
        if edge_feat is not None:
            ef = np.asarray(edge_feat)
            if len(ef) != len(e):
                raise GraphError("edge_feat length does not match edges")

        src = np.concatenate([lo, hi])
        dst = np.concatenate([hi, lo])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        indptr = np.cumsum(indptr)
        if ef is not None:
            ef = np.concatenate([ef, ef])[order]

        if node_feat is None:
            node_feat = np.zeros(n, dtype=np.int64)
        nf = np.asarray(node_feat)
        if nf.dtype.kind in "iu":
            nf = nf.astype(np.int64)
            if nf.ndim != 1:
                raise GraphError("integer node features must be one token per node")
        else:
            nf = nf.astype(np.float64)
            if nf.ndim == 1:
                nf = nf[:, None]
        if len(nf) != n:
            raise GraphError("node_feat length does not match num_nodes")

        yn = None
        if y_node is not None:
            yn = np.asarray(y_node, dtype=np.int64)
            if yn.shape != (n,):
                raise GraphError("y_node length does not match num_nodes")
        if y_graph is not None and yn is not None:
            raise GraphError("a graph carries exactly one target kind")

        return cls(
            num_nodes=n,
            indptr=_frozen(indptr),
            indices=_frozen(dst.astype(np.int64)),
            node_feat=_frozen(nf),
            edge_feat=None if ef is None else _frozen(ef),
            y_graph=None if y_graph is None else float(y_graph),
            y_node=None if yn is None else _frozen(yn),
        )

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    def edge_list(self) -> np.ndarray:
        """Undirected edges as (u, v) rows with u < v, sorted."""
        src = np.repeat(np.arange(self.num_nodes), self.degree())
        keep = src < self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        src = np.repeat(np.arange(self.num_nodes), self.degree())
        a[src, self.indices] = 1.0
        return a

    @property
    def target_kind(self) -> str | None:
        if self.y_graph is not None:
            return "graph"
        if self.y_node is not None:
            return "node"
        return None

    @property
    def uses_tokens(self) -> bool:
        return self.node_feat.ndim == 1

    @property
    def feature_dim(self) -> int:
        return 0 if self.uses_tokens else self.node_feat.shape[1]


# -- k-hop shells -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KHopIndex:
    """Hop-distance rings per node.

    ``ptr[r]`` / ``nodes[r]`` form a CSR table for ring ``r``: the nodes at
    distance exactly ``r`` from ``u`` are ``nodes[r][ptr[r][u]:ptr[r][u+1]]``.
    """

    max_k: int
    ptr: tuple
    nodes: tuple

    def ring(self, u: int, r: int) -> np.ndarray:
        p = self.ptr[r]
        return self.nodes[r][p[u]:p[u + 1]]

    def neighborhood(self, u: int, k: int) -> np.ndarray:
        """N_k(u): nodes within distance k, u included."""
        return np.sort(np.concatenate([self.ring(u, r) for r in range(k + 1)]))


def _bfs_rings(graph: Graph, u: int, max_k: int) -> list[list[int]]:
    rings = [[u]]
    seen = {u}
    frontier = [u]
    for _ in range(max_k):
        nxt = set()
        for w in frontier:
            for v in graph.neighbors(w):
                v = int(v)
                if v not in seen:
                    nxt.add(v)
        seen |= nxt
        frontier = sorted(nxt)
        rings.append(frontier)
        if not frontier:
            # remaining rings stay empty
            rings.extend([] for _ in range(max_k - len(rings) + 1))
            break
    return rings


def khop_index(graph: Graph, max_k: int) -> KHopIndex:
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    per_node = [_bfs_rings(graph, u, max_k) for u in range(graph.num_nodes)]
    ptrs, nodes = [], []
    for r in range(max_k + 1):
        sizes = [len(rings[r]) for rings in per_node]
        ptrs.append(_frozen(np.concatenate([[0], np.cumsum(sizes, dtype=np.int64)]).astype(np.int64)))
        flat = [v for rings in per_node for v in rings[r]]
        nodes.append(_frozen(np.asarray(flat, dtype=np.int64)))
    return KHopIndex(max_k=max_k, ptr=tuple(ptrs), nodes=tuple(nodes))


@dataclass(frozen=True)
class Support:
    """Directed attention pairs: ``dst`` attends over ``src`` (query u, key v).

    Pairs are ordered by query node, then ring, then key node.
    """

    query: np.ndarray
    key: np.ndarray
    ring: np.ndarray
    edge_slot: np.ndarray  # index into graph.indices for ring-1 pairs, -1 otherwise
    num_nodes: int


_support_cache: "weakref.WeakKeyDictionary[Graph, dict]" = weakref.WeakKeyDictionary()


def attention_support(graph: Graph, k: int = 1, include_self: bool = False) -> Support:
    """Pairs (u, v) with 1 <= d(u, v) <= k (plus (u, u) when include_self)."""
    cache = _support_cache.setdefault(graph, {})
    key = ("support", k, include_self)
    if key in cache:
        return cache[key]
    n = graph.num_nodes
    deg = graph.degree()
    if k == 1:
        q = np.repeat(np.arange(n), deg)
        kk = graph.indices.copy()
        ring = np.ones(len(q), dtype=np.int64)
        slot = np.arange(len(q), dtype=np.int64)
    else:
        idx = khop_index(graph, k)
        qs, ks, rs = [], [], []
        for u in range(n):
            for r in range(1, k + 1):
                ring_nodes = idx.ring(u, r)
                qs.append(np.full(len(ring_nodes), u))
                ks.append(ring_nodes)
                rs.append(np.full(len(ring_nodes), r))
        q = np.concatenate(qs).astype(np.int64) if qs else np.zeros(0, np.int64)
        kk = np.concatenate(ks).astype(np.int64) if ks else np.zeros(0, np.int64)
        ring = np.concatenate(rs).astype(np.int64) if rs else np.zeros(0, np.int64)
        slot = np.full(len(q), -1, dtype=np.int64)
        r1 = np.flatnonzero(ring == 1)
        # ring-1 pairs map back to their CSR slot; neighbour lists are sorted
        slot[r1] = np.asarray([graph.indptr[u] + np.searchsorted(graph.neighbors(u), v)
                               for u, v in zip(q[r1], kk[r1])], dtype=np.int64)
    if include_self:
        # self pair goes first within each query's block
        q = np.concatenate([np.arange(n), q])
        kk = np.concatenate([np.arange(n), kk])
        ring = np.concatenate([np.zeros(n, np.int64), ring])
        slot = np.concatenate([np.full(n, -1, np.int64), slot])
        order = np.argsort(q, kind="stable")
        q, kk, ring, slot = q[order], kk[order], ring[order], slot[order]
    sup = Support(_frozen(q), _frozen(kk), _frozen(ring), _frozen(slot), n)
    cache[key] = sup
    return sup


# -- SBM --------------------------------------------------------------------

@dataclass(frozen=True)
class SbmConfig:
    num_graphs: int = 1
    nodes_per_block: int = 20
    num_blocks: int = 2
    p_intra: float = 0.5
    p_inter: float = 0.05
    feature_vocab: int = 3
    seed: int = 0
    # optional per-block intra-block probabilities; None means p_intra everywhere
    block_p_intra: tuple | None = None

    def __post_init__(self):
        if self.num_graphs < 0 or self.nodes_per_block < 1 or self.num_blocks < 1:
            raise ValueError("SbmConfig counts must be positive")
        if self.feature_vocab < 1:
            raise ValueError("feature_vocab must be >= 1")
        intra = self.intra_probs()
        if len(intra) != self.num_blocks:
            raise ValueError("block_p_intra needs one entry per block")
        for p in intra:
            if not 0.0 <= self.p_inter <= p <= 1.0:
                raise ValueError("need 0 <= p_inter <= p_intra <= 1")

    def intra_probs(self) -> tuple:
        if self.block_p_intra is None:
            return (self.p_intra,) * self.num_blocks
        return tuple(float(p) for p in self.block_p_intra)


def generate_sbm(config: SbmConfig) -> list[Graph]:
    rng = np.random.default_rng(config.seed)
    n = config.nodes_per_block * config.num_blocks
    block = np.repeat(np.arange(config.num_blocks), config.nodes_per_block)
    iu, ju = np.triu_indices(n, k=1)
    intra = np.asarray(config.intra_probs())
    prob = np.where(block[iu] == block[ju], intra[block[iu]], config.p_inter)
    graphs = []
    for _ in range(config.num_graphs):
        draw = rng.random(len(iu))
        keep = draw < prob
        feat = rng.integers(0, config.feature_vocab, size=n)
        edges = np.stack([iu[keep], ju[keep]], axis=1)
        graphs.append(Graph.from_edges(n, edges, node_feat=feat, y_node=block))
    return graphs


def random_tree_regression(num_graphs: int = 8, min_nodes: int = 6, vocab: int = 4,
                           max_degree: int = 3, seed: int = 0) -> list[Graph]:
    """Small molecule-like trees with uniform(-1, 1) graph targets.

    Graph i has ``min_nodes + i`` nodes; each new node attaches to an earlier
    node whose degree is still below ``max_degree``.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(num_graphs):
        n = min_nodes + i
        deg = np.zeros(n, dtype=np.int64)
        edges = []
        for j in range(1, n):
            cands = np.flatnonzero(deg[:j] < max_degree)
            k = int(rng.choice(cands))
            edges.append((k, j))
            deg[k] += 1
            deg[j] += 1
        graphs.append(Graph.from_edges(n, sorted(edges), node_feat=rng.integers(0, vocab, n),
                                       y_graph=float(rng.uniform(-1, 1))))
    return graphs


# -- JSONL ------------------------------------------------------------------

def graph_to_record(g: Graph) -> dict:
    rec = {"num_nodes": g.num_nodes, "edges": g.edge_list().tolist()}
    rec["node_feat"] = g.node_feat.tolist()
    if g.edge_feat is not None:
        src = np.repeat(np.arange(g.num_nodes), g.degree())
        rec["edge_feat"] = g.edge_feat[src < g.indices].tolist()
    if g.y_graph is not None:
        rec["y_graph"] = g.y_graph
    if g.y_node is not None:
        rec["y_node"] = g.y_node.tolist()
    return rec


def save_jsonl_dataset(graphs: Sequence[Graph], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_record(g)) + "\n")


def load_jsonl_dataset(path) -> list[Graph]:
    graphs = []
    kind = None
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphError(f"line {lineno}: parse failure: {exc.msg}") from exc
            try:
                g = _graph_from_record(rec)
            except (GraphError, KeyError, TypeError, ValueError) as exc:
                raise GraphError(f"line {lineno}: {exc}") from exc
            if kind is None:
                kind = g.target_kind
            elif g.target_kind != kind:
                raise GraphError(f"line {lineno}: mixed target kinds ({kind} vs {g.target_kind})")
            graphs.append(g)
    return graphs


def _graph_from_record(rec: dict) -> Graph:
    if not isinstance(rec, dict):
        raise GraphError("record must be a JSON object")
    n = rec["num_nodes"]
    if not isinstance(n, int):
        raise GraphError("num_nodes must be an integer")
    edges = rec.get("edges", [])
    for e in edges:
        if len(e) != 2:
            raise GraphError("edges must be [u, v] pairs")
    return Graph.from_edges(
        n, edges,
        node_feat=rec.get("node_feat"),
        edge_feat=rec.get("edge_feat"),
        y_graph=rec.get("y_graph"),
        y_node=rec.get("y_node"),
    )


# -- batching ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GraphBatch:
    graph: Graph
    graph_id: np.ndarray
    offsets: np.ndarray
    graphs: tuple = field(repr=False)
    keys: np.ndarray = field(repr=False)  # dataset position of each member graph

    @property
    def num_graphs(self) -> int:
        return len(self.offsets)


def batch(graphs: Sequence[Graph], keys: Sequence[int] | None = None) -> GraphBatch:
    graphs = list(graphs)
    if not graphs:
        raise GraphError("cannot batch an empty sequence")
    tok = {g.uses_tokens for g in graphs}
    dims = {g.feature_dim for g in graphs}
    if len(tok) > 1 or len(dims) > 1:
        raise GraphError("mixed feature dims")
    kinds = {g.target_kind for g in graphs}
    if len(kinds) > 1:
        raise GraphError("mixed target kinds")
    efs = {g.edge_feat is not None for g in graphs}
    if len(efs) > 1:
        raise GraphError("mixed presence of edge features")

    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    total = int(sizes.sum())
    indptr = [np.zeros(1, np.int64)]
    indices = []
    base = 0
    for g, off in zip(graphs, offsets):
        indptr.append(g.indptr[1:] + base)
        indices.append(g.indices + off)
        base += len(g.indices)
    node_feat = np.concatenate([g.node_feat for g in graphs])
    edge_feat = None
    if graphs[0].edge_feat is not None:
        edge_feat = np.concatenate([g.edge_feat for g in graphs])
    y_node = None
    if graphs[0].y_node is not None:
        y_node = np.concatenate([g.y_node for g in graphs])
    merged = Graph(
        num_nodes=total,
        indptr=_frozen(np.concatenate(indptr)),
        indices=_frozen(np.concatenate(indices) if indices else np.zeros(0, np.int64)),
        node_feat=_frozen(node_feat),
        edge_feat=None if edge_feat is None else _frozen(edge_feat),
        y_graph=None,
        y_node=None if y_node is None else _frozen(y_node),
    )
    graph_id = np.repeat(np.arange(len(graphs)), sizes)
    if keys is None:
        keys = np.arange(len(graphs))
    return GraphBatch(merged, _frozen(graph_id), _frozen(offsets), tuple(graphs),
                      _frozen(np.asarray(keys, dtype=np.int64)))


def batch_targets_graph(b: GraphBatch) -> np.ndarray:
    return np.array([g.y_graph for g in b.graphs], dtype=np.float64)


def batch_support(b: GraphBatch, k: int = 1, include_self: bool = False) -> Support:
    """Support of the merged graph assembled from cached per-graph supports."""
    parts = [attention_support(g, k, include_self) for g in b.graphs]
    slot_base = np.concatenate([[0], np.cumsum([len(g.indices) for g in b.graphs])[:-1]])
    q, kk, ring, slot = [], [], [], []
    for s, off, sb in zip(parts, b.offsets, slot_base):
        q.append(s.query + off)
        kk.append(s.key + off)
        ring.append(s.ring)
        slot.append(np.where(s.edge_slot >= 0, s.edge_slot + sb, -1))
    return Support(np.concatenate(q), np.concatenate(kk), np.concatenate(ring),
                   np.concatenate(slot), b.graph.num_nodes)
