"""Linear dependent tailfree process (LDTFP) error distributions.

The base measure is N(0, sigma^2). Level ``l`` splits the real line into
``2**l`` intervals of equal base mass,

    B(l, k) = (sigma * Phi^-1((k-1)/2^l), sigma * Phi^-1(k/2^l)],  k = 1..2^l.

Each internal node (l, k) carries a coefficient vector ``gamma_{l,k}`` and
sends mass left with probability ``logistic(z~ . gamma_{l,k})`` where
``z~ = (1, z)``. The conditional density is

    f(e | z) = phi_sigma(e) * prod_{l=1..L} 2 * pi_l(e, z),

with ``pi_l`` the branch probability taken at level ``l`` by the path to
``e``. Nodes are stored in heap order: level ``l`` (1-based) occupies rows
``2**(l-1) - 1 .. 2**l - 2`` of the coefficient array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_expit, log_ndtr, logsumexp, ndtr, ndtri

MAX_DEPTH = 8
_LEVEL_OFFSET = np.array([2 ** max(l - 1, 0) - 1 for l in range(MAX_DEPTH + 1)], dtype=np.int64)
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
LOG2 = np.log(2.0)


@dataclass
class LdtfpTree:
    depth: int
    gamma: np.ndarray  # (2**depth - 1, q)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        if not 0 <= self.depth <= MAX_DEPTH:
            raise ValueError(f"tree depth must be in [0, {MAX_DEPTH}]")
        if self.gamma.ndim != 2 or self.gamma.shape[0] != n_nodes(self.depth):
            raise ValueError(f"gamma must have shape ({n_nodes(self.depth)}, q)")

    @classmethod
    def zeros(cls, depth: int, q: int) -> "LdtfpTree":
        return cls(depth, np.zeros((n_nodes(depth), q)))

    @property
    def q(self) -> int:
        return self.gamma.shape[1]

    def node(self, level: int, k: int) -> np.ndarray:
        """Coefficients of node (level, k), both 1-based."""
        return self.gamma[node_index(level, k)]

    def copy(self) -> "LdtfpTree":
        return LdtfpTree(self.depth, self.gamma.copy())

    def to_dict(self) -> dict:
        return {"L": self.depth, "gamma": self.gamma.tolist()}

    @classmethod
    def from_dict(cls, d) -> "LdtfpTree":
        L = int(d["L"])
        g = np.asarray(d["gamma"], dtype=float)
        if g.size == 0:
            g = g.reshape(0, int(d.get("q", 1)))
        return cls(L, g)


def n_nodes(depth: int) -> int:
    return 2**depth - 1


def node_index(level: int, k: int) -> int:
    return 2 ** (level - 1) - 1 + (k - 1)


def node_levels(depth: int) -> np.ndarray:
    """Level (1-based) of each node in heap order."""
    return np.concatenate([np.full(2 ** (l - 1), l) for l in range(1, depth + 1)]) if depth else np.zeros(0, int)


def _cells(u: np.ndarray, depth: int) -> np.ndarray:
    """0-based index of the right-closed level-``depth`` interval containing ``u``."""
    scale = 2.0**depth
    j = np.ceil(u * scale) - 1.0
    return np.clip(j, 0, scale - 1).astype(np.int64)


@dataclass
class Path:
    """Per-observation tree path for residuals ``eps``."""

    u: np.ndarray  # Phi(eps / sigma)
    leaf: np.ndarray  # 0-based terminal interval at level L
    nodes: np.ndarray  # (L, n) heap index of the node visited at each level
    left: np.ndarray  # (L, n) True when the path goes left at that level


def tree_path(eps, sigma: float, depth: int) -> Path:
    eps = np.asarray(eps, dtype=float)
    u = ndtr(eps / sigma)
    leaf = _cells(u, depth)
    shifts = depth - np.arange(1, depth + 1)[:, None]  # (L, 1)
    child = leaf[None, :] >> shifts  # interval index at level l
    nodes = _LEVEL_OFFSET[1 : depth + 1, None] + (child >> 1)
    left = (child & 1) == 0
    return Path(u, leaf, nodes, left)


def _node_etas(path: Path, Z: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """(L, n) linear predictors of the node visited at each level."""
    return np.einsum("lnq,nq->ln", gamma[path.nodes], Z)


def branch_log_probs(path: Path, Z: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """(L, n) log branch probability taken at each level."""
    eta = _node_etas(path, Z, gamma)
    return log_expit(np.where(path.left, eta, -eta))


def _norm_logpdf(eps: np.ndarray, sigma: float) -> np.ndarray:
    x = eps / sigma
    return -0.5 * x * x - np.log(sigma) - _HALF_LOG_2PI


def _as_design(z, n: int) -> np.ndarray:
    """Design rows ``(1, z)``; ``z`` may be (n, q-1) or (q-1,) or empty."""
    z = np.asarray(z, dtype=float)
    if z.ndim <= 1:
        z = np.broadcast_to(z.reshape(1, -1), (n, z.size))
    return np.column_stack([np.ones(n), z])


def log_density_design(eps, Z: np.ndarray, gamma: np.ndarray, sigma2: float, depth: int) -> np.ndarray:
    """Vectorized log f(eps | z) with ``Z`` already including the intercept column."""
    eps = np.asarray(eps, dtype=float)
    sigma = np.sqrt(sigma2)
    out = _norm_logpdf(eps, sigma)
    if depth:
        path = tree_path(eps, sigma, depth)
        out = out + depth * LOG2 + branch_log_probs(path, Z, gamma).sum(axis=0)
    return out


def log_survival_design(eps, Z: np.ndarray, gamma: np.ndarray, sigma2: float, depth: int) -> np.ndarray:
    """Vectorized log P(e > eps | z).

    Mass of intervals entirely above ``eps`` is accumulated along the path: at
    every level where the path goes left, the right sibling subtree carries
    ``prefix * (1 - p)``. The terminal interval adds its mass times the base
    fraction above ``eps``.
    """
    eps = np.asarray(eps, dtype=float)
    sigma = np.sqrt(sigma2)
    if depth == 0:
        return log_ndtr(-eps / sigma)
    path = tree_path(eps, sigma, depth)
    eta = _node_etas(path, Z, gamma)
    lp = log_expit(np.where(path.left, eta, -eta))
    # prefix[l] = log mass of the node visited at level l+1
    prefix = np.vstack([np.zeros((1, eps.size)), np.cumsum(lp, axis=0)[:-1]])
    # right-sibling subtree mass wherever the path goes left
    sib = np.where(path.left, prefix + log_expit(-eta), -np.inf)
    acc = logsumexp(sib, axis=0)
    prefix = prefix[-1] + lp[-1]
    top = path.leaf == 2**depth - 1
    scale = 2.0**depth
    with np.errstate(divide="ignore"):
        frac_mid = np.log(np.maximum((path.leaf + 1) - path.u * scale, 0.0))
    frac_top = depth * LOG2 + log_ndtr(-eps / sigma)
    log_frac = np.where(top, frac_top, frac_mid)
    return np.logaddexp(acc, prefix + log_frac)


def ldtfp_log_density(eps, z, tree: LdtfpTree, sigma2: float):
    """log f(eps | z) for scalar or vector ``eps``; ``z`` excludes the intercept."""
    scalar = np.ndim(eps) == 0
    e = np.atleast_1d(np.asarray(eps, dtype=float))
    Z = _as_design(z, e.size)
    out = log_density_design(e, Z, tree.gamma, sigma2, tree.depth)
    return float(out[0]) if scalar else out


def ldtfp_log_survival(eps, z, tree: LdtfpTree, sigma2: float):
    """log P(e > eps | z) for scalar or vector ``eps``; ``z`` excludes the intercept."""
    scalar = np.ndim(eps) == 0
    e = np.atleast_1d(np.asarray(eps, dtype=float))
    Z = _as_design(z, e.size)
    out = log_survival_design(e, Z, tree.gamma, sigma2, tree.depth)
    return float(out[0]) if scalar else out


def sample_errors(Z: np.ndarray, gamma: np.ndarray, sigma2: float, depth: int,
                  rng: np.random.Generator) -> np.ndarray:
    """One draw per design row: descend by coin flips, then a base draw inside the leaf."""
    n = Z.shape[0]
    cell = np.zeros(n, dtype=np.int64)
    for l in range(1, depth + 1):
        node = 2 ** (l - 1) - 1 + cell
        p_left = 1.0 / (1.0 + np.exp(-np.einsum("ij,ij->i", Z, gamma[node])))
        go_right = rng.random(n) >= p_left
        cell = 2 * cell + go_right
    scale = 2.0**depth
    w = rng.random(n)
    # inverse CDF inside the leaf; upper half via the survival side for accuracy
    tiny = np.finfo(float).tiny
    u = np.maximum((cell + w) / scale, tiny)
    s = np.maximum((scale - cell - w) / scale, tiny)
    eps = np.where(u > 0.5, -ndtri(s), ndtri(u))
    return np.sqrt(sigma2) * eps
