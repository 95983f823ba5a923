"""Global and local Moran's I, permutation inference, Pearson screening."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dataset import AdjacencyGraph, DataError, Dataset


class Standardization(str, Enum):
    BINARY = "binary"
    ROW = "row_standardized"


@dataclass(frozen=True)
class WeightsMatrix:
    base: AdjacencyGraph
    standardization: Standardization = Standardization.ROW

    @property
    def dense(self) -> np.ndarray:
        A = self.base.adjacency_matrix()
        if Standardization(self.standardization) is Standardization.BINARY:
            return A
        rows = A.sum(axis=1, keepdims=True)
        return np.divide(A, rows, out=np.zeros_like(A), where=rows > 0)

    def w(self, i: int, j: int) -> float:
        return float(self.dense[i, j])

    @property
    def n(self) -> int:
        return self.base.m


def weights(graph: AdjacencyGraph, standardization: str = "row_standardized") -> WeightsMatrix:
    return WeightsMatrix(graph, Standardization(standardization))


@dataclass(frozen=True)
class MoranGlobalResult:
    I: float
    expected_I: float
    n_permutations: int
    pseudo_p: float
    seed: int

    def to_dict(self) -> dict:
        return {"I": self.I, "expected_I": self.expected_I, "n_permutations": self.n_permutations,
                "pseudo_p": self.pseudo_p, "seed": self.seed}


@dataclass(frozen=True)
class MoranLocalResult:
    I: np.ndarray
    pseudo_p: np.ndarray
    labels: list[str]


def _dense(W) -> np.ndarray:
    return W.dense if isinstance(W, WeightsMatrix) else np.asarray(W, dtype=float)


def _check_values(values, n: int) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size != n:
        raise DataError(f"values length {x.size} does not match weights dimension {n}")
    if x.size < 3:
        raise DataError("Moran's I needs at least 3 units")
    if np.ptp(x) == 0.0:
        raise DataError("zero variance: Moran's I is undefined for a constant field")
    return x


def global_morans_i(values, W) -> float:
    """Moran's I for ``values`` under spatial weights ``W``."""
    Wd = _dense(W)
    x = _check_values(values, Wd.shape[0])
    s0 = Wd.sum()
    if s0 == 0:
        raise DataError("weights have no edges (sum of weights is zero)")
    d = x - x.mean()
    return float(len(x) / s0 * (d @ Wd @ d) / (d @ d))


def _stream(seed: int, k: int) -> np.random.Generator:
    # one independent stream per permutation index; order of evaluation is irrelevant
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))


def _one_sided_p(observed: float, perms: np.ndarray) -> float:
    if observed >= 0:
        count = int(np.sum(perms >= observed))
    else:
        count = int(np.sum(perms <= observed))
    return (count + 1) / (len(perms) + 1)


def permutation_test_global(values, W, n_perm: int = 999, seed: int = 0) -> MoranGlobalResult:
    """Randomization test for global Moran's I, one-sided toward the observed sign."""
    if n_perm < 1:
        raise DataError("n_perm must be >= 1")
    Wd = _dense(W)
    x = _check_values(values, Wd.shape[0])
    obs = global_morans_i(x, Wd)
    n = len(x)
    d = x - x.mean()
    perm = np.empty((n_perm, n))
    for k in range(n_perm):
        perm[k] = _stream(seed, k).permutation(d)
    s0 = Wd.sum()
    sims = n / s0 * np.einsum("ki,ij,kj->k", perm, Wd, perm) / (d @ d)
    return MoranGlobalResult(obs, -1.0 / (n - 1), n_perm, _one_sided_p(obs, sims), seed)


def _zscores(x: np.ndarray, ddof: int) -> np.ndarray:
    return (x - x.mean()) / x.std(ddof=ddof)


def local_morans_i(values, W, ddof: int = 1) -> np.ndarray:
    """Local Moran's ``I_i = z_i * sum_j w_ij z_j``.

    ``z`` are deviations from the mean divided by the standard deviation with
    the given ``ddof`` (1 = sample sd). Units without neighbours get 0.
    """
    Wd = _dense(W)
    x = _check_values(values, Wd.shape[0])
    z = _zscores(x, ddof)
    return z * (Wd @ z)


def permutation_test_local(values, W, n_perm: int = 999, seed: int = 0, ddof: int = 1) -> np.ndarray:
    """Conditional randomization pseudo p-values for local Moran's I.

    For each unit the own value is held fixed and its neighbour slots are
    filled with a random draw, without replacement, from the other N-1 values.
    Units with no neighbours get p = 1.
    """
    if n_perm < 1:
        raise DataError("n_perm must be >= 1")
    Wd = _dense(W)
    x = _check_values(values, Wd.shape[0])
    n = len(x)
    z = _zscores(x, ddof)
    obs = z * (Wd @ z)
    deg = (Wd != 0).sum(axis=1)
    kmax = int(deg.max()) if n else 0
    # neighbour weights of each unit, padded with zeros to kmax
    wrow = np.zeros((n, max(kmax, 1)))
    for i in range(n):
        nz = Wd[i][Wd[i] != 0]
        wrow[i, : len(nz)] = nz
    # others[i] lists the indices j != i
    others = np.array([[j for j in range(n) if j != i] for i in range(n)]).reshape(n, n - 1)
    sims = np.empty((n_perm, n))
    for k in range(n_perm):
        keys = _stream(seed, k).random((n, n - 1))
        pick = np.argsort(keys, axis=1)[:, :kmax]
        zz = z[np.take_along_axis(others, pick, axis=1)]
        sims[k] = z * np.sum(wrow[:, :kmax] * zz, axis=1)
    p = np.empty(n)
    for i in range(n):
        p[i] = 1.0 if deg[i] == 0 else _one_sided_p(obs[i], sims[:, i])
    return p


def classify_clusters(values, local_I, pseudo_p, alpha: float = 0.05, W=None) -> list[str]:
    """Label units HH/LL/LH/HL by the quadrant of (z_i, spatial lag of z_i).

    The quadrant is read from ``z_i`` and the sign of ``I_i`` (same sign as z_i
    times the lag) unless ``W`` is given, in which case the lag is computed.
    """
    x = np.asarray(values, dtype=float)
    I = np.asarray(local_I, dtype=float)
    p = np.asarray(pseudo_p, dtype=float)
    if not (len(x) == len(I) == len(p)):
        raise DataError("values, local_I and pseudo_p must have the same length")
    z = x - x.mean()
    if W is not None:
        lag = _dense(W) @ z
    else:
        lag = np.sign(I) * np.sign(z)
    labels = []
    for zi, li, pi in zip(z, lag, p):
        if pi > alpha or zi == 0 or li == 0:
            labels.append("NotSignificant")
        elif zi > 0:
            labels.append("HH" if li > 0 else "HL")
        else:
            labels.append("LH" if li > 0 else "LL")
    return labels


def local_moran_analysis(values, W, n_perm: int = 999, seed: int = 0,
                         alpha: float = 0.05) -> MoranLocalResult:
    I = local_morans_i(values, W)
    p = permutation_test_local(values, W, n_perm=n_perm, seed=seed)
    return MoranLocalResult(I, p, classify_clusters(values, I, p, alpha=alpha, W=W))


# --------------------------------------------------------------------------- correlation


@dataclass(frozen=True)
class CorrelationMatrix:
    names: tuple[str, ...]
    r: np.ndarray
    undefined: tuple[tuple[str, str], ...] = ()


def pearson_matrix(dataset: Dataset, variables=None) -> CorrelationMatrix:
    """Sample Pearson correlations; pairs with a constant variable are NaN."""
    names = tuple(variables) if variables is not None else ("event_time_days",) + dataset.covariate_names
    if len(dataset) < 3:
        raise DataError("Pearson correlation needs at least 3 records")
    cols = np.column_stack([dataset.column(n) for n in names])
    k = len(names)
    r = np.eye(k)
    sd = cols.std(axis=0, ddof=1)
    centered = cols - cols.mean(axis=0)
    undefined = []
    for a in range(k):
        for b in range(a + 1, k):
            if sd[a] == 0 or sd[b] == 0:
                r[a, b] = r[b, a] = np.nan
                undefined.append((names[a], names[b]))
                continue
            val = centered[:, a] @ centered[:, b] / ((len(cols) - 1) * sd[a] * sd[b])
            r[a, b] = r[b, a] = float(np.clip(val, -1.0, 1.0))
    for a in range(k):
        if sd[a] == 0:
            r[a, a] = np.nan
    return CorrelationMatrix(names, r, tuple(undefined))


def collinearity_screen(matrix: CorrelationMatrix, threshold: float = 0.7) -> list[tuple[str, str, float]]:
    """Off-diagonal pairs with ``|r| > threshold``, largest first."""
    names, r = matrix.names, matrix.r
    out = []
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            v = r[a, b]
            if np.isfinite(v) and abs(v) > threshold:
                out.append((names[a], names[b], float(v)))
    out.sort(key=lambda t: (-abs(t[2]), t[0], t[1]))
    return out
