"""
One graph transformer layer, and checking its gradients
=======================================================
"""
import numpy as np

from sea import autodiff as ad
from sea.graph import Graph, attention_support
from sea.gtl import LayerConfig, attention_weights, gtl_forward, init_gtl_params, readout

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

g = Graph.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)])
cfg = LayerConfig(num_heads=2, hidden_dim=4, use_edge_features=True)
sup = attention_support(g, 1)
params = init_gtl_params("layer", cfg, rng)

h = ad.param(rng.normal(size=(5, 4)))
e = ad.param(rng.normal(size=(len(sup.query), 4)))

# per-pair weights for each head; they sum to one over each node's neighbours
w = attention_weights(h, e, sup, params, "layer", cfg)
for u in range(5):
    print(u, "->", sup.key[sup.query == u], w[sup.query == u].T)

h2, e2 = gtl_forward(h, e, sup, params, "layer", cfg)
print("node states", h2.shape, "pair states", e2.shape)
print("graph vector (sum readout):", readout(h2, np.zeros(5, int), 1).data)

# backprop through the layer into every parameter
with ad.Tape() as tape:
    h2, e2 = gtl_forward(h, e, sup, params, "layer", cfg)
    loss = ad.add(ad.sum_all(ad.relu(h2)), ad.mean_all(e2))
grads = ad.backward(tape, loss)
print("d loss / d Q norm:", np.linalg.norm(grads[params["layer.Q"]]))


def f():
    out, eo = gtl_forward(h, e, sup, params, "layer", cfg)
    return ad.add(ad.sum_all(ad.relu(out)), ad.mean_all(eo))


# central differences against the tape, one tensor at a time
for name in ("layer.Q", "layer.E", "layer.ffn_h.W1"):
    print(name, "max rel err %.2e" % ad.finite_diff_gradcheck(lambda _: f(), params[name]))
print("inputs h: %.2e" % ad.finite_diff_gradcheck(lambda _: f(), h))
