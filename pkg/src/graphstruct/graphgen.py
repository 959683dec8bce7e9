"""Probabilistic graph generator: Bernoulli edge matrix, sampling,
straight-through gradient routing, adjacency normalization, hypercube
projection, and the fixed-graph constructors (kNN / Erdos-Renyi / dense
/ RBF)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import numcore as nc
from .numcore import DenseMatrix, Node, Rng, SparseMatrix


class GraphError(ValueError):
    pass


@dataclass
class EdgeDistribution:
    """Independent Bernoulli probability per (directed or mirrored) edge."""

    n: int
    theta: np.ndarray
    symmetric: bool = True
    diag_zero: bool = True

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.n, self.n):
            raise GraphError(f"theta must be {self.n}x{self.n}")
        self.validate()

    def validate(self):
        if self.theta.min() < 0.0 or self.theta.max() > 1.0:
            raise GraphError("theta entries must lie in [0, 1]")
        if self.symmetric and not np.allclose(self.theta, self.theta.T):
            raise GraphError("theta must be symmetric")
        if self.diag_zero and np.any(np.diag(self.theta) != 0.0):
            raise GraphError("theta diagonal must be zero")

    def expected_edges(self) -> float:
        """Sum of theta over the free entries (upper triangle if symmetric)."""
        if self.symmetric:
            return float(np.triu(self.theta, 1).sum())
        return float(self.theta.sum())

    @classmethod
    def deterministic(cls, adjacency, symmetric=True, diag_zero=True) -> "EdgeDistribution":
        """Point mass on one adjacency matrix (theta of zeros and ones)."""
        a = adjacency.densify() if isinstance(adjacency, SparseMatrix) else np.asarray(adjacency)
        a = (np.asarray(a, dtype=np.float64) != 0).astype(np.float64)
        if symmetric:
            a = np.maximum(a, a.T)
        if diag_zero:
            np.fill_diagonal(a, 0.0)
        return cls(a.shape[0], a, symmetric=symmetric, diag_zero=diag_zero)


@dataclass
class SampledGraph:
    adjacency: SparseMatrix
    normalized: SparseMatrix
    sample_seed: int

    def dense_adjacency(self) -> np.ndarray:
        return self.adjacency.densify()


def _draw_adjacency(theta: np.ndarray, symmetric: bool, diag_zero: bool, seed: int) -> np.ndarray:
    n = theta.shape[0]
    u = Rng(seed).uniform((n, n))
    a = (u < theta).astype(np.float64)
    if symmetric:
        # only i<j entries are drawn, then mirrored
        upper = np.triu(a, 1)
        a = upper + upper.T
    if diag_zero:
        np.fill_diagonal(a, 0.0)
    return a


def sample(dist: EdgeDistribution, rng: Rng) -> SampledGraph:
    """Draw one adjacency matrix A ~ Ber(theta) and its normalization."""
    seed = rng.next_seed()
    a = _draw_adjacency(dist.theta, dist.symmetric, dist.diag_zero, seed)
    adj = SparseMatrix.from_dense(a)
    return SampledGraph(adj, normalize_adjacency(adj), seed)


def resample(dist: EdgeDistribution, sample_seed: int) -> SampledGraph:
    """Reproduce the sample drawn with `sample_seed` exactly."""
    a = _draw_adjacency(dist.theta, dist.symmetric, dist.diag_zero, sample_seed)
    adj = SparseMatrix.from_dense(a)
    return SampledGraph(adj, normalize_adjacency(adj), sample_seed)


def normalize_adjacency(a: SparseMatrix) -> SparseMatrix:
    """Self-loop augmented symmetric normalization of a binary adjacency."""
    m = a.to_csr()
    if m.shape[0] != m.shape[1]:
        raise GraphError("adjacency must be square")
    n = m.shape[0]
    deg = 1.0 + np.asarray(m.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(deg)
    a_hat = sp.diags(dinv) @ (m + sp.identity(n, format="csr")) @ sp.diags(dinv)
    return SparseMatrix.from_csr(a_hat.tocsr())


def normalize_adjacency_node(a: Node) -> Node:
    """Taped version of the normalization for a dense (possibly relaxed)
    adjacency, differentiable w.r.t. every entry."""
    n = a.shape[0]
    eye = np.eye(n)
    a_plus = nc.add(a, nc.leaf(eye, a.tape))
    deg = nc.add(nc.sumrows(a), nc.leaf(np.ones((n, 1)), a.tape))
    dinv = nc.div(nc.leaf(np.ones((n, 1)), a.tape), nc.sqrt(deg))
    return nc.mul(nc.mul(a_plus, dinv), nc.transpose(dinv))


def straight_through_route(downstream_grad_wrt_a, symmetric: bool = False,
                           diag_zero: bool = True) -> np.ndarray:
    """Identity gradient routing from sampled adjacency back to theta.

    In symmetric mode the contributions at (i, j) and (j, i) fold onto the
    single free parameter, mirrored so theta stays symmetric.
    """
    g = nc.as_array(downstream_grad_wrt_a)
    if g.shape[0] != g.shape[1]:
        raise GraphError(f"gradient must be square, got {g.shape}")
    if symmetric:
        g = g + g.T
        g = np.triu(g, 1)
        g = g + g.T
    if diag_zero:
        g = g.copy()
        np.fill_diagonal(g, 0.0)
    return g


def project_hypercube(theta, symmetric: bool = False, diag_zero: bool = False) -> np.ndarray:
    """Euclidean projection onto the unit box (plus structural constraints)."""
    t = nc.as_array(theta).copy()
    if symmetric:
        t = 0.5 * (t + t.T)
    t = np.clip(t, 0.0, 1.0)
    if diag_zero:
        np.fill_diagonal(t, 0.0)
    return t


# ---------------------------------------------------------------------------
# fixed-graph constructors


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.maximum(d2, 0.0)


def knn_graph(x, k: int, metric: str = "euclidean") -> SparseMatrix:
    """Union-symmetrized k-nearest-neighbor graph on the feature rows.

    Ties are broken by lower node index; no self edges.
    """
    xv = nc.as_array(x)
    n = xv.shape[0]
    if k <= 0 or k >= n:
        raise GraphError(f"k must be in (0, {n}), got {k}")
    if metric == "euclidean":
        d = _pairwise_sq_dists(xv)
    elif metric == "cosine":
        norms = np.linalg.norm(xv, axis=1)
        norms = np.where(norms == 0.0, 1.0, norms)
        d = 1.0 - (xv @ xv.T) / np.outer(norms, norms)
    else:
        raise GraphError(f"unknown metric {metric!r}")
    np.fill_diagonal(d, np.inf)
    a = np.zeros((n, n))
    idx = np.arange(n)
    for i in range(n):
        order = np.lexsort((idx, d[i]))  # distance, then node index
        a[i, order[:k]] = 1.0
    a = np.maximum(a, a.T)  # union symmetrization
    return SparseMatrix.from_dense(a)


def fixed_graph(kind: str, x, rng: Rng | None = None, er_prob: float = 0.1,
                rbf_sigma: float | None = None):
    """Baseline graph initializers.

    er -> one Erdos-Renyi sample; dense -> complete graph; rbf -> dense
    RBF-kernel weighted adjacency (zero diagonal).
    """
    xv = nc.as_array(x)
    n = xv.shape[0]
    if kind == "sparse_er":
        if not 0.0 < er_prob < 1.0:
            raise GraphError("ER edge probability must be in (0, 1)")
        if rng is None:
            raise GraphError("sparse_er needs an rng")
        theta = np.full((n, n), er_prob)
        np.fill_diagonal(theta, 0.0)
        g = sample(EdgeDistribution(n, np.minimum(theta, theta.T)), rng)
        return g.adjacency
    if kind == "dense":
        a = np.ones((n, n))
        np.fill_diagonal(a, 0.0)
        return SparseMatrix.from_dense(a)
    if kind == "rbf":
        d2 = _pairwise_sq_dists(xv)
        if rbf_sigma is None:
            off = d2[~np.eye(n, dtype=bool)]
            rbf_sigma = float(np.sqrt(np.median(off)))  # median pairwise distance
        if rbf_sigma <= 0:
            raise GraphError("RBF bandwidth must be positive")
        a = np.exp(-d2 / (2.0 * rbf_sigma**2))
        np.fill_diagonal(a, 0.0)
        return SparseMatrix.from_dense(a)
    raise GraphError(f"unknown fixed graph kind {kind!r}")


# ---------------------------------------------------------------------------
# scalar Bernoulli surrogate (bias of the identity routing)


def bernoulli_quadratic_st_expectation(a: float, b: float, theta: float) -> float:
    """Exact expectation of the straight-through estimate of
    d/dtheta E[(a z - b)^2 / 2], z ~ Ber(theta), by enumeration over z."""

    def dh(z):
        return (a * z - b) * a

    return theta * dh(1.0) + (1.0 - theta) * dh(0.0)


def bernoulli_quadratic_true_gradient(a: float, b: float) -> float:
    """Exact d/dtheta E[(a z - b)^2 / 2] by enumeration over z."""

    def h(z):
        return (a * z - b) ** 2 / 2.0

    return h(1.0) - h(0.0)


# ---------------------------------------------------------------------------
# export


def export_theta(dist: EdgeDistribution, path, threshold: float = 1e-4):
    """Write theta as `i j theta_ij` triples, dropping entries below
    threshold."""
    with open(path, "w") as f:
        f.write(f"# n={dist.n} symmetric={int(dist.symmetric)}\n")
        rows, cols = np.nonzero(dist.theta >= threshold)
        for i, j in zip(rows, cols):
            f.write(f"{i} {j} {dist.theta[i, j]:.17g}\n")


def load_theta(path) -> EdgeDistribution:
    with open(path) as f:
        header = f.readline().strip()
        parts = dict(kv.split("=") for kv in header.lstrip("# ").split())
        n = int(parts["n"])
        symmetric = bool(int(parts["symmetric"]))
        theta = np.zeros((n, n))
        for line in f:
            i, j, v = line.split()
            theta[int(i), int(j)] = float(v)
    return EdgeDistribution(n, theta, symmetric=symmetric)
