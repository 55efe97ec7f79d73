"""Undirected graphs, the self-loop-normalized Laplacian, Dirichlet energy,
homophily and the two-class stochastic block model used in the experiments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ._kernels import csr_matmat, jacobi_eigh
from .errors import DimensionError


def _frozen(arr):
    arr = np.asarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Graph:
    """Immutable weighted undirected graph with node features and optional labels.

    ``edges`` holds each undirected pair once as ``(u, v)`` with ``u < v``;
    ``adjacency`` is the symmetric CSR matrix without self-loops.
    """

    n: int
    edges: np.ndarray
    weights: np.ndarray
    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: Optional[np.ndarray] = None

    @classmethod
    def from_edges(cls, n, edges, weights=None, features=None, labels=None):
        """Build a graph from a possibly messy pair list.

        Pairs are symmetrized and deduplicated keeping the largest weight;
        self-loops and non-positive weights are dropped.
        """
        n = int(n)
        if n <= 0:
            raise ValueError("empty graph")
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if weights is None:
            weights = np.ones(len(edges))
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if len(weights) != len(edges):
            raise DimensionError("one weight per edge required")
        if len(edges) and (edges.min() < 0 or edges.max() >= n):
            raise ValueError(f"edge endpoint outside [0, {n})")

        u = np.minimum(edges[:, 0], edges[:, 1])
        v = np.maximum(edges[:, 0], edges[:, 1])
        keep = (u != v) & (weights > 0)
        u, v, w = u[keep], v[keep], weights[keep]
        # sort by (u, v, w) so the last entry of each pair run has the max weight
        order = np.lexsort((w, v, u))
        u, v, w = u[order], v[order], w[order]
        last = np.ones(len(u), dtype=bool)
        if len(u) > 1:
            last[:-1] = (u[1:] != u[:-1]) | (v[1:] != v[:-1])
        u, v, w = u[last], v[last], w[last]

        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        vals = np.concatenate([w, w])
        adj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        adj.sort_indices()

        if features is None:
            features = np.ones((n, 1))
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[:, None]
        if features.shape[0] != n:
            raise DimensionError(f"features have {features.shape[0]} rows, expected {n}")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != n:
                raise DimensionError(f"labels have {labels.shape[0]} entries, expected {n}")
            if labels.min() < 0:
                raise ValueError("labels must be non-negative class ids")
            labels = _frozen(labels.copy())

        for arr in (adj.data, adj.indices, adj.indptr):
            arr.setflags(write=False)
        return cls(
            n=n,
            edges=_frozen(np.stack([u, v], axis=1)),
            weights=_frozen(w),
            adjacency=adj,
            features=_frozen(features.copy()),
            labels=labels,
        )

    @property
    def num_classes(self):
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def with_features(self, features):
        return Graph.from_edges(self.n, self.edges, self.weights, features, self.labels)

    def with_labels(self, labels):
        return Graph.from_edges(self.n, self.edges, self.weights, self.features, labels)

    def permuted(self, perm):
        """Relabel nodes: new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        labels = None if self.labels is None else self.labels[perm]
        return Graph.from_edges(self.n, inv[self.edges], self.weights, self.features[perm], labels)

    def neighbors(self, i):
        a = self.adjacency
        return a.indices[a.indptr[i] : a.indptr[i + 1]]


@dataclass(frozen=True)
class LaplacianBundle:
    """Laplacian-family operators of a graph with self-loop normalization.

    ``norm_laplacian`` is D~^{-1/2} (D - A) D~^{-1/2} with D~ = D + I and
    ``propagator`` is I minus it.
    """

    degree: np.ndarray
    dtilde_sqrt: np.ndarray
    norm_laplacian: sp.csr_matrix
    propagator: sp.csr_matrix
    lambda_max_estimate: float

    @property
    def n(self):
        return self.degree.shape[0]

    def kernel_vector(self):
        """Unnormalized null vector D~^{1/2} 1 of the normalized Laplacian."""
        return self.dtilde_sqrt.copy()

    def laplacian_apply(self, X):
        return spmm(self.norm_laplacian, X)

    def propagate(self, X):
        return spmm(self.propagator, X)


def spmm(mat, X):
    """Sparse CSR matrix times a dense vector or matrix via the package kernel."""
    X = np.asarray(X, dtype=np.float64)
    vec = X.ndim == 1
    out = csr_matmat(mat.indptr, mat.indices, mat.data, X[:, None] if vec else X)
    return out[:, 0] if vec else out


def _power_lambda_max(lap, iters=200, seed=0, block=8):
    """Block power iteration with a Rayleigh-Ritz step on the final block.

    A single vector stalls when the two largest eigenvalues are close; a block
    of ``block`` vectors converges at the rate of the gap to the eigenvalue
    just below the block, which is what keeps the estimate above lambda_max
    in practice. Returns the top Ritz value and its residual norm.
    """
    n = lap.shape[0]
    k = min(block, n)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    for _ in range(iters):
        Y = spmm(lap, Q)
        if not np.any(Y):
            return 0.0, 0.0
        Q, _ = np.linalg.qr(Y)
    Y = spmm(lap, Q)
    H = Q.T @ Y
    w, V, _, _ = jacobi_eigh(0.5 * (H + H.T))
    i = int(np.argmax(w))
    v = Q @ V[:, i]
    rho = float(w[i])
    resid = float(np.linalg.norm(spmm(lap, v) - rho * v))
    return rho, resid


def build_laplacian_bundle(g: Graph, power_iters=200) -> LaplacianBundle:
    """Assemble degree, normalized Laplacian, propagator and a lambda_max bound.

    The bound is the block power-iteration Ritz value plus its residual norm,
    times 1 + 1e-6, capped at 2 (the spectrum of the normalized Laplacian
    lies in [0, 2)).
    """
    if g.n == 0:
        raise ValueError("empty graph")
    adj = g.adjacency
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    dts = np.sqrt(deg + 1.0)
    inv = sp.diags(1.0 / dts)
    lap = (inv @ (sp.diags(deg) - adj) @ inv).tocsr()
    lap.sort_indices()
    lap.eliminate_zeros()
    prop = (inv @ (adj + sp.identity(g.n)) @ inv).tocsr()
    prop.sort_indices()
    rho, resid = _power_lambda_max(lap, iters=power_iters)
    lam = min(2.0, (rho + resid) * (1.0 + 1e-6))
    for m in (lap, prop):
        for arr in (m.data, m.indices, m.indptr):
            arr.setflags(write=False)
    return LaplacianBundle(
        degree=_frozen(deg),
        dtilde_sqrt=_frozen(dts),
        norm_laplacian=lap,
        propagator=prop,
        lambda_max_estimate=float(lam),
    )


def _as_2d(X, n):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != n:
        raise DimensionError(f"X has {X.shape[0]} rows, graph has {n} nodes")
    return X


def quadratic_energy(lap, X):
    """tr(X^T L X) for a sparse or dense symmetric ``lap``."""
    X = _as_2d(X, lap.shape[0])
    LX = spmm(lap, X) if sp.issparse(lap) else lap @ X
    return float(max(np.sum(X * LX), 0.0))


def dirichlet_energy(bundle: LaplacianBundle, X) -> float:
    """Dirichlet energy tr(X^T L~ X)."""
    return quadratic_energy(bundle.norm_laplacian, X)


def dirichlet_energy_edges(g: Graph, X) -> float:
    """Edge-sum form 1/2 sum_ij A_ij (X_i/sqrt(1+d_i) - X_j/sqrt(1+d_j))^2."""
    X = _as_2d(X, g.n)
    deg = np.asarray(g.adjacency.sum(axis=1)).reshape(-1)
    Y = X / np.sqrt(1.0 + deg)[:, None]
    u, v = g.edges[:, 0], g.edges[:, 1]
    diff = Y[u] - Y[v]
    # each undirected edge appears twice in the double sum, cancelling the 1/2
    return float(np.sum(g.weights[:, None] * diff * diff))


def relu_energy_check(bundle: LaplacianBundle, X):
    """Return ``(E(X), E(relu(X)))``; the second never exceeds the first."""
    X = _as_2d(X, bundle.n)
    return dirichlet_energy(bundle, X), dirichlet_energy(bundle, np.maximum(X, 0.0))


def homophily(g: Graph) -> float:
    """Mean fraction of same-label neighbours, over nodes with at least one neighbour."""
    if g.labels is None:
        raise ValueError("labels required")
    a = g.adjacency
    counts = np.diff(a.indptr)
    rows = np.repeat(np.arange(g.n), counts)
    same = (g.labels[rows] == g.labels[a.indices]).astype(np.float64)
    same_per_node = np.bincount(rows, weights=same, minlength=g.n)
    has = counts > 0
    if not has.any():
        return float("nan")
    return float(np.mean(same_per_node[has] / counts[has]))


def generate_sbm(seed, n=100, p_in=0.9, p_out=0.1, mu=0.5, sigma=2.0) -> Graph:
    """Two equal classes, 2-D Gaussian features with means -mu / +mu.

    Nodes ``0..n/2-1`` are class 0, the rest class 1. Every unordered pair is
    connected independently with ``p_in`` inside a class and ``p_out`` across.
    """
    if n % 2:
        raise ValueError("n must be even so both classes have n/2 nodes")
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    rng = np.random.default_rng(seed)
    half = n // 2
    labels = np.repeat([0, 1], half)
    features = np.empty((n, 2))
    features[:half] = rng.normal(-mu, sigma, size=(half, 2))
    features[half:] = rng.normal(mu, sigma, size=(half, 2))
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(len(iu)) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    return Graph.from_edges(n, edges, features=features, labels=labels)


def stratified_split(labels, seed, fractions=(0.6, 0.2, 0.2)):
    """Seeded per-class train/val/test split; returns a dict of sorted index arrays."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(round(fractions[0] * len(idx)))
        n_va = int(round(fractions[1] * len(idx)))
        parts["train"].append(idx[:n_tr])
        parts["val"].append(idx[n_tr : n_tr + n_va])
        parts["test"].append(idx[n_tr + n_va :])
    return {k: np.sort(np.concatenate(v)) for k, v in parts.items()}


def bfs_distances(g, source):
    """Hop distances from ``source`` in a Graph or along a CSR pattern; -1 if unreachable."""
    a = g.adjacency if isinstance(g, Graph) else g
    dist = np.full(a.shape[0], -1, dtype=np.int64)
    dist[source] = 0
    frontier = [source]
    d = 0
    while frontier:
        d += 1
        nxt = []
        for i in frontier:
            for j in a.indices[a.indptr[i] : a.indptr[i + 1]]:
                if dist[j] < 0:
                    dist[j] = d
                    nxt.append(j)
        frontier = nxt
    return dist
