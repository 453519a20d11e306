"""Normalized Laplacian, cyclic Jacobi eigensolver and Laplacian positional encodings."""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .graph import Graph


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(f"Jacobi did not converge after {sweeps} sweeps "
                         f"(off-diagonal residual {residual:.3e})")
        self.residual = residual
        self.sweeps = sweeps


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray   # ascending
    eigenvectors: np.ndarray  # columns aligned with eigenvalues


def normalized_laplacian(graph: Graph) -> np.ndarray:
    a = graph.adjacency()
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = np.eye(graph.num_nodes) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return lap


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def _normalize_signs(u: np.ndarray) -> np.ndarray:
    u = u.copy()
    mag = np.abs(u)
    for j in range(u.shape[1]):
        # near-equal magnitudes resolve to the lowest index
        i = int(np.flatnonzero(mag[:, j] >= mag[:, j].max() - 1e-10)[0])
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
    return u


def eigendecompose_symmetric(matrix, tol: float = 1e-12, max_sweeps: int = 100) -> Spectrum:
    """Cyclic Jacobi rotations.

    Sweeps over all (p, q) pairs in row order until the off-diagonal
    Frobenius norm drops below ``tol`` times the matrix norm.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if n and np.max(np.abs(a - a.T)) > 1e-12:
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = max(float(np.linalg.norm(a)), 1e-300)

    sweeps = 0
    while _off_norm(a) > tol * scale:
        if sweeps >= max_sweeps:
            raise ConvergenceError(_off_norm(a), sweeps)
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return Spectrum(w[order], _normalize_signs(v[:, order]))


_lpe_cache: "weakref.WeakKeyDictionary[Graph, dict]" = weakref.WeakKeyDictionary()


def lpe(graph: Graph, lpe_dim: int, skip_trivial: bool = False) -> np.ndarray:
    """Per-node coordinates in the ``lpe_dim`` smallest Laplacian eigenvectors.

    Zero-padded on the right when the graph has fewer usable eigenvectors.
    """
    if lpe_dim < 1:
        raise ValueError("lpe_dim must be >= 1")
    cache = _lpe_cache.setdefault(graph, {})
    key = (lpe_dim, skip_trivial)
    if key in cache:
        return cache[key]
    n = graph.num_nodes
    out = np.zeros((n, lpe_dim))
    if n:
        spectrum = eigendecompose_symmetric(normalized_laplacian(graph))
        vecs = spectrum.eigenvectors
        if skip_trivial:
            vecs = vecs[:, spectrum.eigenvalues >= 1e-8]
        m = min(lpe_dim, vecs.shape[1])
        out[:, :m] = vecs[:, :m]
    out.setflags(write=False)
    cache[key] = out
    return out
