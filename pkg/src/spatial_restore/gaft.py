"""Generalized accelerated failure time model with ICAR frailties.

    log t = x~' beta + v_unit + eps,   eps | z ~ G_z (LDTFP centred at N(0, sigma^2))

Right-censored records contribute ``log S(resid | z)``; observed records
contribute ``log f(resid | z) - log t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln

from . import ldtfp
from .dataset import AdjacencyGraph, DataError, Dataset, UnitRecord, connected_components
from .ldtfp import LdtfpTree

FRAILTY_MODES = ("none", "icar")
SUM_TO_ZERO_TOL = 1e-8


@dataclass(frozen=True)
class ModelSpec:
    covariate_names: tuple[str, ...]
    baseline_covariate_names: tuple[str, ...] | None = None  # None: same as covariate_names
    frailty_mode: str = "icar"
    tree_depth: int = 4
    # tree design uses (z - baseline_center) / baseline_scale; None = raw z
    baseline_center: tuple[float, ...] | None = None
    baseline_scale: tuple[float, ...] | None = None
    standardize_baseline: bool = True
    # root split fixed at 1/2 so every G_z has median 0 (median regression)
    median_zero: bool = True

    def __post_init__(self):
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if self.baseline_covariate_names is None:
            object.__setattr__(self, "baseline_covariate_names", self.covariate_names)
        else:
            object.__setattr__(self, "baseline_covariate_names", tuple(self.baseline_covariate_names))
        if self.frailty_mode not in FRAILTY_MODES:
            raise ValueError(f"frailty_mode must be one of {FRAILTY_MODES}")
        if not 0 <= self.tree_depth <= ldtfp.MAX_DEPTH:
            raise ValueError(f"tree_depth must be in [0, {ldtfp.MAX_DEPTH}]")
        missing = set(self.baseline_covariate_names) - set(self.covariate_names)
        if missing:
            raise ValueError(f"baseline covariates not among model covariates: {sorted(missing)}")
        k = len(self.baseline_covariate_names)
        for name in ("baseline_center", "baseline_scale"):
            val = getattr(self, name)
            if val is not None:
                val = tuple(float(x) for x in val)
                if len(val) != k:
                    raise ValueError(f"{name} must have {k} entries")
                object.__setattr__(self, name, val)
        if self.baseline_scale is not None and any(s == 0 for s in self.baseline_scale):
            raise ValueError("baseline_scale entries must be non-zero")

    def standardized_for(self, dataset: "Dataset") -> "ModelSpec":
        """Copy with tree-design centring/scaling taken from ``dataset`` (mean, sample sd).

        No-op when constants are already set or standardization is disabled.
        """
        if not self.standardize_baseline or self.baseline_center is not None or len(dataset) < 2:
            return self
        Zr = dataset.covariate_matrix(self.baseline_covariate_names)
        sd = Zr.std(axis=0, ddof=1)
        sd = np.where(sd > 0, sd, 1.0)
        return replace(self, baseline_center=tuple(Zr.mean(axis=0)), baseline_scale=tuple(sd))

    def tree_design(self, z_raw: np.ndarray) -> np.ndarray:
        """Rows ``(1, standardized z)`` from raw baseline covariates of shape (n, q-1)."""
        z = np.asarray(z_raw, dtype=float)
        z = z.reshape(1, -1) if z.ndim < 2 else z
        if z.shape[1] != self.q - 1:
            raise ValueError(f"expected {self.q - 1} baseline covariates, got {z.shape[1]}")
        if self.baseline_center is not None:
            z = (z - np.asarray(self.baseline_center)) / np.asarray(self.baseline_scale)
        return np.column_stack([np.ones(len(z)), z])

    @property
    def p(self) -> int:
        return len(self.covariate_names) + 1

    @property
    def q(self) -> int:
        return len(self.baseline_covariate_names) + 1

    @property
    def first_free_node(self) -> int:
        """Heap index of the first sampled tree node."""
        return 1 if (self.median_zero and self.tree_depth > 0) else 0

    def to_dict(self) -> dict:
        return {"covariate_names": list(self.covariate_names),
                "baseline_covariate_names": list(self.baseline_covariate_names),
                "frailty_mode": self.frailty_mode, "tree_depth": self.tree_depth,
                "baseline_center": None if self.baseline_center is None else list(self.baseline_center),
                "baseline_scale": None if self.baseline_scale is None else list(self.baseline_scale),
                "standardize_baseline": self.standardize_baseline, "median_zero": self.median_zero}

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(tuple(d["covariate_names"]), d.get("baseline_covariate_names"),
                   d.get("frailty_mode", "icar"), int(d.get("tree_depth", 4)),
                   d.get("baseline_center"), d.get("baseline_scale"),
                   bool(d.get("standardize_baseline", True)), bool(d.get("median_zero", True)))


@dataclass
class GaftParams:
    beta: np.ndarray
    v: np.ndarray
    tau2: float
    sigma2: float
    alpha: float
    tree: LdtfpTree

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        for name in ("tau2", "sigma2", "alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def copy(self) -> "GaftParams":
        return GaftParams(self.beta.copy(), self.v.copy(), self.tau2, self.sigma2, self.alpha,
                          self.tree.copy())

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "v": self.v.tolist(), "tau2": self.tau2,
                "sigma2": self.sigma2, "alpha": self.alpha,
                "tree": {**self.tree.to_dict(), "q": self.tree.q}}

    @classmethod
    def from_dict(cls, d) -> "GaftParams":
        return cls(np.asarray(d["beta"], float), np.asarray(d.get("v", []), float), float(d["tau2"]),
                   float(d["sigma2"]), float(d["alpha"]), LdtfpTree.from_dict(d["tree"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True)
class PriorConfig:
    beta_mean: np.ndarray | None = None  # None: zeros
    beta_cov: np.ndarray | None = None  # None: 1e4 * I
    a_tau: float = 1.0
    b_tau: float = 1.0
    a0: float = 1.0
    b0: float = 1.0
    a_sigma: float = 1.0
    b_sigma: float = 1.0

    def __post_init__(self):
        for name in ("a_tau", "b_tau", "a0", "b0", "a_sigma", "b_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"prior hyperparameter {name} must be positive")
        if self.beta_cov is not None:
            S = np.asarray(self.beta_cov, dtype=float)
            if not np.allclose(S, S.T):
                raise ValueError("beta_cov must be symmetric")
            np.linalg.cholesky(S)  # raises LinAlgError when not positive-definite

    def mean(self, p: int) -> np.ndarray:
        m = np.zeros(p) if self.beta_mean is None else np.asarray(self.beta_mean, dtype=float)
        if m.shape != (p,):
            raise ValueError(f"beta_mean must have length {p}")
        return m

    def cov(self, p: int) -> np.ndarray:
        S = 1e4 * np.eye(p) if self.beta_cov is None else np.asarray(self.beta_cov, dtype=float)
        if S.shape != (p, p):
            raise ValueError(f"beta_cov must be {p}x{p}")
        return S

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("a_tau", "b_tau", "a0", "b0", "a_sigma", "b_sigma")}
        d["beta_mean"] = None if self.beta_mean is None else np.asarray(self.beta_mean).tolist()
        d["beta_cov"] = None if self.beta_cov is None else np.asarray(self.beta_cov).tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "PriorConfig":
        kw = {k: float(d[k]) for k in ("a_tau", "b_tau", "a0", "b0", "a_sigma", "b_sigma") if k in d}
        if d.get("beta_mean") is not None:
            kw["beta_mean"] = np.asarray(d["beta_mean"], float)
        if d.get("beta_cov") is not None:
            kw["beta_cov"] = np.asarray(d["beta_cov"], float)
        return cls(**kw)


# --------------------------------------------------------------------------- model data


@dataclass
class ModelData:
    """Dense arrays for likelihood evaluation."""

    X: np.ndarray  # (n, p) with intercept column
    Z: np.ndarray  # (n, q) with intercept column
    log_t: np.ndarray
    event: np.ndarray  # True = observed, False = right-censored
    unit: np.ndarray  # graph index of each record (zeros when no frailty)
    m: int  # number of frailty units (0 when frailty_mode = none)
    depth: int
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))
    n_components: int = 0
    component: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def __post_init__(self):
        self.obs_idx = np.flatnonzero(self.event)
        self.cens_idx = np.flatnonzero(~self.event)
        self.Z_obs = self.Z[self.obs_idx]
        self.Z_cens = self.Z[self.cens_idx]
        self.log_t_obs = self.log_t[self.obs_idx]

    @property
    def n(self) -> int:
        return len(self.log_t)


def check_icar_graph(graph: AdjacencyGraph) -> None:
    if graph.m < 2:
        raise DataError("ICAR frailties need at least 2 units")
    deg = graph.degree_vector()
    isolated = [u for u, d in zip(graph.unit_ids, deg) if d == 0]
    if isolated:
        raise DataError(f"units without neighbours under ICAR frailties: {isolated}; "
                        "add an edge or use frailty_mode='none'")


def build_model_data(dataset: Dataset, spec: ModelSpec, graph: AdjacencyGraph | None = None) -> ModelData:
    n = len(dataset)
    X = np.column_stack([np.ones(n), dataset.covariate_matrix(spec.covariate_names)]) if n else np.zeros((0, spec.p))
    Z = spec.tree_design(dataset.covariate_matrix(spec.baseline_covariate_names)) if n else np.zeros((0, spec.q))
    log_t = np.log(dataset.event_times) if n else np.zeros(0)
    event = ~dataset.censored if n else np.zeros(0, bool)
    if spec.frailty_mode == "icar":
        if graph is None:
            raise DataError("frailty_mode='icar' requires an adjacency graph")
        check_icar_graph(graph)
        idx = graph.index
        missing = [u for u in dataset.unit_ids if u not in idx]
        if missing:
            raise DataError(f"dataset units missing from the adjacency graph: {missing}")
        unit = np.array([idx[u] for u in dataset.unit_ids], dtype=int)
        c, labels = connected_components(graph)
        return ModelData(X, Z, log_t, event, unit, graph.m, spec.tree_depth,
                         graph.edge_index_pairs(), c, np.asarray(labels, int))
    return ModelData(X, Z, log_t, event, np.zeros(n, int), 0, spec.tree_depth)


def linear_predictor(data: ModelData, params: GaftParams) -> np.ndarray:
    eta = data.X @ params.beta
    if data.m:
        eta = eta + params.v[data.unit]
    return eta


# --------------------------------------------------------------------------- likelihood


def pointwise_log_likelihood(data: ModelData, params: GaftParams) -> np.ndarray:
    """Per-record log-likelihood contributions on the time scale."""
    return log_likelihood_from_resid(data, data.log_t - linear_predictor(data, params),
                                     params.tree.gamma, params.sigma2)


def log_likelihood_from_resid(data: ModelData, resid: np.ndarray, gamma: np.ndarray,
                              sigma2: float) -> np.ndarray:
    out = np.empty(data.n)
    if data.obs_idx.size:
        out[data.obs_idx] = ldtfp.log_density_design(resid[data.obs_idx], data.Z_obs, gamma, sigma2,
                                                     data.depth) - data.log_t_obs
    if data.cens_idx.size:
        out[data.cens_idx] = ldtfp.log_survival_design(resid[data.cens_idx], data.Z_cens, gamma,
                                                       sigma2, data.depth)
    return out


def check_params(data: ModelData, params: GaftParams) -> None:
    if params.beta.shape != (data.X.shape[1],):
        raise DataError(f"beta has length {params.beta.size}, expected {data.X.shape[1]}")
    if params.v.shape != (data.m,):
        raise DataError(f"v has length {params.v.size}, expected {data.m}")
    if params.tree.depth != data.depth or params.tree.q != data.Z.shape[1]:
        raise DataError("tree shape does not match model spec")


def total_log_likelihood(dataset: Dataset, params: GaftParams, spec: ModelSpec,
                         graph: AdjacencyGraph | None = None) -> float:
    data = build_model_data(dataset, spec, graph)
    check_params(data, params)
    return float(np.sum(pointwise_log_likelihood(data, params)))


# --------------------------------------------------------------------------- priors


def icar_quadratic_form(v, edges: np.ndarray) -> float:
    """Sum over edges of (v_i - v_j)^2."""
    v = np.asarray(v, dtype=float)
    if len(edges) == 0:
        return 0.0
    d = v[edges[:, 0]] - v[edges[:, 1]]
    return float(d @ d)


def _icar_parts(graph_or_data):
    if isinstance(graph_or_data, ModelData):
        return graph_or_data.edges, graph_or_data.m, graph_or_data.n_components, graph_or_data.component
    c, labels = connected_components(graph_or_data)
    return graph_or_data.edge_index_pairs(), graph_or_data.m, c, np.asarray(labels, int)


def icar_log_prior(v, tau2: float, graph, check_constraint: bool = True) -> float:
    """ICAR log density up to a constant: -Q(v)/(2 tau2) - (m - c)/2 log tau2."""
    edges, m, c, labels = _icar_parts(graph)
    v = np.asarray(v, dtype=float)
    if v.shape != (m,):
        raise DataError(f"v has length {v.size}, expected {m}")
    if check_constraint:
        sums = np.bincount(labels, weights=v, minlength=c)
        if np.any(np.abs(sums) > SUM_TO_ZERO_TOL * max(1.0, np.abs(v).sum())):
            raise DataError("frailties violate the sum-to-zero constraint")
    return -icar_quadratic_form(v, edges) / (2.0 * tau2) - 0.5 * (m - c) * np.log(tau2)


def gamma_logpdf(x: float, shape: float, rate: float) -> float:
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


def mvn_logpdf(x, mean, cov) -> float:
    C = np.linalg.cholesky(cov)
    r = np.linalg.solve(C, np.asarray(x, float) - mean)
    return float(-0.5 * r @ r - np.log(np.diag(C)).sum() - 0.5 * len(r) * np.log(2 * np.pi))


def tree_log_prior(gamma: np.ndarray, alpha: float, depth: int, first_node: int = 0) -> float:
    """Independent N(0, (alpha l^2)^-1 I) on the coefficient vector of every free node."""
    if depth == 0 or gamma.size == 0:
        return 0.0
    prec = alpha * ldtfp.node_levels(depth).astype(float)[first_node:] ** 2
    q = gamma.shape[1]
    g = gamma[first_node:]
    return float(np.sum(0.5 * q * np.log(prec / (2 * np.pi)) - 0.5 * prec * np.sum(g**2, axis=1)))


def log_prior_total(params: GaftParams, priors: PriorConfig, spec: ModelSpec,
                    graph=None) -> float:
    """Sum of all prior log densities; the ICAR term is unnormalized.

    Variance parameters are given Gamma priors on their precisions, and the
    density is expressed with respect to the precision.
    """
    for name in ("tau2", "sigma2", "alpha"):
        if not getattr(params, name) > 0:
            raise DataError(f"{name} must be positive")
    p = spec.p
    lp = mvn_logpdf(params.beta, priors.mean(p), priors.cov(p))
    if spec.frailty_mode == "icar":
        if graph is None:
            raise DataError("ICAR prior requires a graph")
        lp += icar_log_prior(params.v, params.tau2, graph)
        lp += gamma_logpdf(1.0 / params.tau2, priors.a_tau, priors.b_tau)
    lp += gamma_logpdf(1.0 / params.sigma2, priors.a_sigma, priors.b_sigma)
    lp += gamma_logpdf(params.alpha, priors.a0, priors.b0)
    if spec.first_free_node and np.any(params.tree.gamma[0] != 0):
        raise DataError("root node coefficients must be zero when median_zero is set")
    lp += tree_log_prior(params.tree.gamma, params.alpha, params.tree.depth, spec.first_free_node)
    return float(lp)


# --------------------------------------------------------------------------- survival


def baseline_survival(t, x, params: GaftParams, spec: ModelSpec, v: float = 0.0):
    """S(t | x) for covariates ``x`` ordered as ``spec.covariate_names``."""
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t <= 0):
        raise DataError("survival time must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != len(spec.covariate_names):
        raise DataError("covariate vector length does not match spec")
    pos = [spec.covariate_names.index(n) for n in spec.baseline_covariate_names]
    eta = params.beta[0] + x @ params.beta[1:] + v
    resid = np.log(t) - eta
    Z = np.broadcast_to(spec.tree_design(x[pos]), (t.size, spec.q))
    out = np.exp(ldtfp.log_survival_design(resid, Z, params.tree.gamma, params.sigma2, params.tree.depth))
    return float(out[0]) if scalar else out


def median_time_ratio(coef: float, delta: float = 1.0) -> float:
    """Multiplicative change of every survival quantile for a ``delta`` change in a covariate."""
    return float(np.exp(coef * delta))


# --------------------------------------------------------------------------- simulation


def sample_icar(graph: AdjacencyGraph, tau2: float, rng: np.random.Generator) -> np.ndarray:
    """Exact sum-to-zero ICAR draw on the non-null eigenbasis of the graph Laplacian."""
    lam, U = np.linalg.eigh(graph.laplacian())
    c, _ = connected_components(graph)
    lam, U = lam[c:], U[:, c:]
    coef = rng.standard_normal(lam.size) * np.sqrt(tau2 / lam)
    return U @ coef


def icar_covariance(graph: AdjacencyGraph, tau2: float = 1.0) -> np.ndarray:
    return tau2 * np.linalg.pinv(graph.laplacian(), hermitian=True)


CovariateGenerator = Callable[[np.random.Generator, int], np.ndarray]


def simulate_dataset(spec: ModelSpec, true_params: GaftParams, graph: AdjacencyGraph | None,
                     covariate_generator: CovariateGenerator, n: int | None = None, seed: int = 0,
                     censor_time: float | None = None, unit_ids: Sequence[str] | None = None,
                     resample_frailty: bool = False) -> Dataset:
    """Draw a dataset with one record per unit.

    Under ICAR frailties there is one record per graph unit and ``n`` must be
    None or equal to the graph size. ``true_params.v`` is used unless
    ``resample_frailty`` is set, in which case a fresh ICAR draw with
    ``true_params.tau2`` is taken. Records with ``t > censor_time`` are
    right-censored at ``censor_time``.
    """
    rng = np.random.default_rng(seed)
    if spec.frailty_mode == "icar":
        if graph is None:
            raise DataError("ICAR simulation needs a graph")
        check_icar_graph(graph)
        if n is not None and n != graph.m:
            raise DataError("under ICAR frailties n must equal the number of graph units")
        n = graph.m
        ids = list(graph.unit_ids)
        v = sample_icar(graph, true_params.tau2, rng) if resample_frailty else true_params.v
        if v.shape != (n,):
            raise DataError("true frailty vector does not match graph size")
    else:
        if n is None:
            raise DataError("n is required without frailties")
        ids = list(unit_ids) if unit_ids is not None else [f"s{i:05d}" for i in range(n)]
        v = np.zeros(n)
    Xc = np.asarray(covariate_generator(rng, n), dtype=float).reshape(n, len(spec.covariate_names))
    X = np.column_stack([np.ones(n), Xc])
    pos = [spec.covariate_names.index(nm) for nm in spec.baseline_covariate_names]
    Z = spec.tree_design(Xc[:, pos])
    eps = ldtfp.sample_errors(Z, true_params.tree.gamma, true_params.sigma2, true_params.tree.depth, rng)
    t = np.exp(X @ true_params.beta + v + eps)
    records = []
    for i in range(n):
        cens = censor_time is not None and t[i] > censor_time
        ti = censor_time if cens else t[i]
        records.append(UnitRecord(ids[i], float(ti), bool(cens), tuple(float(c) for c in Xc[i])))
    return Dataset(tuple(records), spec.covariate_names)
