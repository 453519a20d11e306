"""Randomised finite-difference gradient suites, shared by the CLI and the tests."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .graph import Graph, batch, attention_support
from .gtl import LayerConfig, gtl_forward, init_gtl_params, readout
from .model import SeaConfig, build_model, model_forward
from .train import task_loss

TOL = 1e-4


def random_graph(rng: np.random.Generator, max_nodes: int = 8, p: float = 0.4,
                 edge_vocab: int = 0, vocab: int = 4, y_graph=None, y_node=None) -> Graph:
    n = int(rng.integers(3, max_nodes + 1))
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    ef = rng.integers(0, edge_vocab, size=len(edges)) if edge_vocab else None
    if y_node == "random":
        y_node = rng.integers(0, 2, size=n)
    return Graph.from_edges(n, edges, node_feat=rng.integers(0, vocab, size=n), edge_feat=ef,
                            y_graph=y_graph, y_node=y_node)


def _projected(out: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    return ad.sum_all(ad.mul(out, ad.Tensor(weights)))


def _check_op(fn, inputs, rng) -> float:
    """Gradcheck sum(fn(*inputs) * R) against every input."""
    out_shape = fn(*inputs).shape
    w = rng.normal(size=out_shape)
    return ad.gradcheck_all(lambda: _projected(fn(*inputs), w), inputs)


def autodiff_cases(rng: np.random.Generator, i: int = 0):
    """Yield ``(name, error)`` for one random instance of every differentiable op."""
    p = lambda *shape: ad.param(rng.normal(size=shape))  # noqa: E731
    n, d = int(rng.integers(2, 7)), int(rng.integers(1, 8))
    a, b = p(n, d), p(d, 3)
    yield "matmul", _check_op(ad.matmul, [a, b], rng)
    yield "add", _check_op(ad.add, [p(n, d), p(d)], rng)
    yield "sub", _check_op(ad.sub, [p(n, d), p(1, d)], rng)
    yield "mul", _check_op(ad.mul, [p(n, d), p(n, d)], rng)
    yield "scale", _check_op(lambda x: ad.scale(x, 2.5), [p(n, d)], rng)
    yield "concat_last_dim", _check_op(lambda x, y: ad.concat_last_dim([x, y]), [p(n, d), p(n, 2)], rng)
    yield "relu", _check_op(ad.relu, [p(n, d)], rng)
    yield "sum_rows", _check_op(ad.sum_rows, [p(n, d)], rng)
    yield "mean_all", _check_op(ad.mean_all, [p(n, d)], rng)
    idx = rng.integers(0, n, size=n + 3)
    yield "gather_rows", _check_op(lambda x: ad.gather_rows(x, idx), [p(n, d)], rng)
    yield "scatter_add_rows", _check_op(lambda x: ad.scatter_add_rows(x, idx, n), [p(n + 3, d)], rng)
    mask = rng.random((n, n)) < 0.6
    mask[0] = False  # one fully masked row
    yield "masked_row_softmax", _check_op(lambda x: ad.masked_row_softmax(x, mask), [p(n, n)], rng)
    seg = np.sort(rng.integers(0, n, size=2 * n))
    yield "segment_softmax", _check_op(lambda x: ad.segment_softmax(x, seg, n), [p(2 * n, 2)], rng)
    yield "segment_max", _check_op(lambda x: ad.segment_max(x, seg, n), [p(2 * n, d)], rng)
    yield "row_scale", _check_op(lambda x: ad.row_scale(x, np.arange(n) + 0.5), [p(n, d)], rng)
    yield "dropout", _check_op(lambda x: ad.dropout(x, 0.3, np.random.default_rng(5)), [p(n, d)], rng)
    t = rng.normal(size=(n, 1))
    x = p(n, 1)
    yield "l1_loss", ad.finite_diff_gradcheck(lambda z: ad.l1_loss(z, t), x)
    yb = rng.integers(0, 2, size=(n, 1))
    yield "bce_with_logits", ad.finite_diff_gradcheck(lambda z: ad.bce_with_logits(z, yb), p(n, 1))
    yc = rng.integers(0, 3, size=n)
    cw = rng.uniform(0.5, 2.0, size=3)
    yield "weighted_cross_entropy", ad.finite_diff_gradcheck(
        lambda z: ad.weighted_cross_entropy(z, yc, cw), p(n, 3))


def gtl_cases(rng: np.random.Generator, i: int = 0):
    heads = int(rng.choice([1, 2]))
    d = heads * int(rng.integers(1, 5))
    edges = bool(rng.integers(0, 2))
    g = random_graph(rng, edge_vocab=3 if edges else 0)
    k = int(rng.integers(1, 3))
    cfg = LayerConfig(num_heads=heads, hidden_dim=d, use_edge_features=edges,
                      use_bias=bool(rng.integers(0, 2)), include_self=bool(rng.integers(0, 2)),
                      num_rings=k if rng.random() < 0.5 else 1)
    sup = attention_support(g, k, cfg.include_self)
    params = init_gtl_params("l", cfg, rng)
    for key in params:
        if key.endswith(("b1", "b2")):
            params[key].data[:] = rng.normal(size=params[key].shape)
    h = ad.param(rng.normal(size=(g.num_nodes, d)))
    e = ad.param(rng.normal(size=(len(sup.query), d))) if edges else None
    wh = rng.normal(size=(g.num_nodes, d))
    we = rng.normal(size=(len(sup.query), d))

    def loss():
        h2, e2 = gtl_forward(h, e, sup, params, "l", cfg)
        out = _projected(h2, wh)
        if e2 is not None:
            out = ad.add(out, _projected(e2, we))
        return out

    tensors = [h] + ([e] if edges else []) + list(params.values())
    yield f"gtl_forward(H={heads},d={d},k={k},edges={edges})", ad.gradcheck_all(loss, tensors)
    gid = np.sort(rng.integers(0, 2, size=g.num_nodes))
    for mode in ("sum", "mean", "max"):
        w = rng.normal(size=(2, d))
        yield f"readout[{mode}]", ad.gradcheck_all(lambda: _projected(readout(h, gid, 2, mode), w), [h])


SEA_VARIANTS = (
    ("SEA_GNN", {}),
    ("SEA_AGGREGATED", {}),
    ("SEA_KHOP", {"khop": 2}),
    ("SEA_KHOP", {"khop": 2, "augmented": True}),
)


def sea_cases(rng: np.random.Generator, i: int = 0, variants=SEA_VARIANTS):
    """One end-to-end instance; the variant cycles with ``i``."""
    for variant, extra in [variants[i % len(variants)]]:
        task = str(rng.choice(["graph_regression", "graph_binary", "node_classification"]))
        heads = int(rng.choice([1, 2]))
        d = heads * int(rng.integers(1, 3))
        edges = bool(rng.integers(0, 2))
        cfg = SeaConfig(variant=variant, num_experts=int(rng.integers(2, 4)), task=task,
                        num_heads=heads, hidden_dim=d, lpe_dim=3, node_vocab=4,
                        use_edge_features=edges, edge_vocab=3 if edges else 0, **extra)
        model = build_model(cfg, int(rng.integers(0, 2**31)))
        if task == "node_classification":
            graphs = [random_graph(rng, max_nodes=6, y_node="random", edge_vocab=3) for _ in range(2)]
        else:
            y = lambda: float(rng.integers(0, 2)) if task == "graph_binary" else float(rng.normal())  # noqa: E731
            graphs = [random_graph(rng, max_nodes=6, y_graph=y(), edge_vocab=3) for _ in range(2)]
        b = batch(graphs)
        _, fixed = model_forward(b, model)
        # mix routing so several experts take part
        fixed = type(fixed)(fixed.probs, rng.integers(0, cfg.num_experts, size=len(fixed.choice)),
                            fixed.explored)

        def loss():
            pred, _ = model_forward(b, model, routing=fixed)
            return task_loss(pred, b, task, cfg.num_classes)

        name = f"model_forward[{variant}{'-aug' if extra.get('augmented') else ''},{task},edges={edges}]"
        yield name, ad.gradcheck_all(loss, list(model.params.values()))


SUITES = {"autodiff": autodiff_cases, "gtl": gtl_cases, "sea": sea_cases}


def run_suite(module: str | None = None, instances: int = 20, seed: int = 0):
    """Run ``instances`` random draws of each requested suite; returns (name, error) rows."""
    rows = []
    names = [module] if module else list(SUITES)
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown gradcheck module {name!r}; choose from {sorted(SUITES)}")
        rng = np.random.default_rng(seed)
        for i in range(instances):
            rows.extend(SUITES[name](rng, i))
    return rows
