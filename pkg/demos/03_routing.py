"""
Routing nodes to shell experts
==============================

Each node goes to exactly one expert. The router is a linear map plus
softmax on the embedded node state; exploration picks a random expert
with probability epsilon.
"""
import numpy as np

from sea import autodiff as ad
from sea.graph import batch, generate_sbm, SbmConfig
from sea.model import SeaConfig, build_model, model_forward, route
from sea.train import expert_distribution_report

np.set_printoptions(precision=4, suppress=True)

d = route(np.array([[1.0]]), np.array([[0.0, 5.0, 0.0]]))
print("probs", d.probs[0], "choice", d.choice[0])

# a zero router ties everything, lowest index wins
print(route(np.ones((3, 2)), np.zeros((2, 4))).choice)

rng = np.random.default_rng(1)
h = rng.normal(size=(10_000, 8))
for eps in (0.0, 0.3, 1.0):
    dec = route(h, rng.normal(size=(8, 8)) * 0.1, epsilon=eps, seed=7)
    rep = expert_distribution_report(dec.choice, 8)
    print(f"eps={eps}: explored {dec.explored.mean():.3f}, freq {rep.frequencies}")

# hard routing: the loss of one node only reaches the expert it was sent to
g = generate_sbm(SbmConfig(nodes_per_block=5))[0]
m = build_model(SeaConfig(variant="SEA_KHOP", khop=2, num_experts=3, hidden_dim=8, num_heads=2,
                          node_vocab=3, lpe_dim=4, task="node_classification"), seed=0)
with ad.Tape() as tape:
    pred, dec = model_forward(batch([g]), m)
    loss = ad.sum_all(ad.gather_rows(pred, [0]))
grads = ad.backward(tape, loss)
print("node 0 routed to expert", dec.choice[0])
for i in range(3):
    print(f"  |grad expert{i}.W| =", np.abs(grads[m.params[f'expert{i}.W']]).sum())
# the argmax is not differentiable, so the router receives nothing
print("  router.W in grads:", m.params["router.W"] in grads)

# the epsilon schedule used during training
cfg = m.config
print([round(cfg.epsilon(t), 3) for t in range(0, 30, 5)])
