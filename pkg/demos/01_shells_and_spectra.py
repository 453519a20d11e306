"""
Graph shells and Laplacian coordinates
======================================

Builds a small graph, lists the hop rings around one node, shows how the
attention support grows with k, and prints the positional encodings.
"""
import numpy as np

from sea.graph import Graph, attention_support, khop_index
from sea.spectral import eigendecompose_symmetric, lpe, normalized_laplacian

np.set_printoptions(precision=3, suppress=True)

# two triangles joined by a short path: 0-1-2 triangle, 2-3-4, 4-5-6 triangle
g = Graph.from_edges(7, [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (4, 5), (4, 6), (5, 6)])
print("degrees", g.degree())

idx = khop_index(g, 4)
for r in range(5):
    print(f"ring {r} around node 0:", idx.ring(0, r))

# every extra hop widens who node 0 can attend to
for k in (1, 2, 3):
    s = attention_support(g, k)
    print(f"k={k}: node 0 attends over", s.key[s.query == 0], "rings", s.ring[s.query == 0])

# the self pair is opt-in
s = attention_support(g, 1, include_self=True)
print("with self:", s.key[s.query == 0])

lap = normalized_laplacian(g)
spectrum = eigendecompose_symmetric(lap)
print("eigenvalues", spectrum.eigenvalues)  # one zero: the graph is connected

# 4 smallest eigenvectors per node, trivial one included; pad beyond n
print(lpe(g, 4))
print("padded row for a 2-node graph:", lpe(Graph.from_edges(2, [(0, 1)]), 4)[0])

# an isolated node gets eigenvalue 1 rather than 0
print(eigendecompose_symmetric(normalized_laplacian(Graph.from_edges(3, [(0, 1)]))).eigenvalues)
