"""Multi-chain Metropolis-within-Gibbs sampler for the GAFT model.

One sweep runs, in order: beta (adaptive random-walk block), tree nodes
(per-node random walk, one level at a time), log sigma^2 (random walk),
alpha (Gibbs), frailties (single-site random walk, vectorized over graph
colour classes), tau^2 (Gibbs). Adaptation runs only during burn-in.
"""

from __future__ import annotations

import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ldtfp
from .dataset import AdjacencyGraph, DataError, Dataset
from .gaft import (
    GaftParams,
    ModelData,
    ModelSpec,
    PriorConfig,
    build_model_data,
    gamma_logpdf,
    icar_quadratic_form,
    linear_predictor,
    log_likelihood_from_resid,
)
from .ldtfp import LdtfpTree

BLOCKS = ("beta", "tree", "sigma2", "alpha", "v", "tau2")
SCALAR_TARGET = 0.44
THREADS_ENV = "SPATIAL_RESTORE_THREADS"


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 4
    n_iter: int = 50000
    burn_in: int = 30000
    thin: int = 5
    seed: int = 0
    adapt_window: int = 50
    target_accept: float = 0.234
    progress_every: int = 0  # 0 disables progress lines
    use_likelihood: bool = True
    fixed: tuple[str, ...] = ()  # blocks held at their initial values

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.burn_in < 0 or self.n_iter <= self.burn_in:
            raise ValueError("no kept draws: n_iter must exceed burn_in")
        if self.kept == 0:
            raise ValueError("no kept draws: (n_iter - burn_in) < thin")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must be in (0, 1)")
        unknown = set(self.fixed) - set(BLOCKS)
        if unknown:
            raise ValueError(f"unknown blocks in fixed: {sorted(unknown)}")
        object.__setattr__(self, "fixed", tuple(self.fixed))

    @property
    def kept(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    @classmethod
    def quick(cls, **kw) -> "McmcConfig":
        base = dict(n_chains=4, n_iter=2000, burn_in=1000, thin=1)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed"] = list(self.fixed)
        return d


# --------------------------------------------------------------------------- chain state


@dataclass
class ChainState:
    params: GaftParams
    ll: np.ndarray  # pointwise log-likelihood at params (zeros when likelihood is off)
    iteration: int = 0
    beta_chol: np.ndarray | None = None
    beta_log_scale: float = 0.0
    beta_mean: np.ndarray | None = None
    beta_m2: np.ndarray | None = None
    beta_count: int = 0
    node_log_scale: np.ndarray | None = None
    sigma_log_scale: float = np.log(0.3)
    v_log_scale: np.ndarray | None = None
    ridge_chol: np.ndarray | None = None
    ridge_log_scale: float = 0.0
    tree_scale_log_step: float = np.log(0.1)
    accepted: dict = field(default_factory=dict)
    proposed: dict = field(default_factory=dict)

    def tally(self, block: str, acc, n=1):
        self.accepted[block] = self.accepted.get(block, 0) + acc
        self.proposed[block] = self.proposed.get(block, 0) + n


@dataclass
class Context:
    """Everything a sweep needs besides the state."""

    data: ModelData
    priors: PriorConfig
    config: McmcConfig
    rng: np.random.Generator
    prior_mean: np.ndarray
    prior_prec: np.ndarray
    prior_cov: np.ndarray
    degree: np.ndarray | None = None
    colors: list[np.ndarray] = field(default_factory=list)
    color_rows: list[np.ndarray] = field(default_factory=list)  # adjacency rows per colour class
    first_node: int = 0  # tree nodes before this heap index are held fixed
    levels: np.ndarray = field(default_factory=lambda: np.zeros(0))
    record_index: list[np.ndarray] = field(default_factory=list)
    ridge_map: np.ndarray | None = None  # (m, p): frailty shift compensating a beta step

    def ll(self, params: GaftParams, beta=None, v=None, gamma=None, sigma2=None) -> np.ndarray:
        if not self.config.use_likelihood:
            return np.zeros(self.data.n)
        b = params.beta if beta is None else beta
        vv = params.v if v is None else v
        eta = self.data.X @ b
        if self.data.m:
            eta = eta + vv[self.data.unit]
        return log_likelihood_from_resid(self.data, self.data.log_t - eta,
                                         params.tree.gamma if gamma is None else gamma,
                                         params.sigma2 if sigma2 is None else sigma2)


def greedy_coloring(graph_neighbors: list[list[int]]) -> list[np.ndarray]:
    """Colour classes of a greedy vertex colouring; each class is an independent set."""
    m = len(graph_neighbors)
    color = [-1] * m
    for i in range(m):
        used = {color[j] for j in graph_neighbors[i] if color[j] >= 0}
        c = 0
        while c in used:
            c += 1
        color[i] = c
    col = np.asarray(color)
    return [np.flatnonzero(col == c) for c in range(col.max() + 1)] if m else []


def _gain(state: ChainState, cfg: McmcConfig) -> float:
    return 1.0 / (1.0 + state.iteration / cfg.adapt_window) ** 0.6


def metropolis_accept(log_ratio, log_u) -> np.ndarray:
    """Accept iff ``log_u < log_ratio``: the min(1, exp(delta)) rule for symmetric proposals."""
    return np.asarray(log_u) < np.asarray(log_ratio)


def _log_prior_beta(ctx: Context, beta: np.ndarray) -> float:
    d = beta - ctx.prior_mean
    return -0.5 * d @ ctx.prior_prec @ d


def _log_prior_log_sigma2(ctx: Context, log_s2: float) -> float:
    # Gamma prior on the precision exp(-log_s2), with the change-of-variables term
    p = ctx.priors
    return gamma_logpdf(np.exp(-log_s2), p.a_sigma, p.b_sigma) - log_s2


def update_beta(state: ChainState, ctx: Context, adapt: bool) -> ChainState:
    par = state.params
    p = par.beta.size
    step = np.exp(state.beta_log_scale) * (state.beta_chol @ ctx.rng.standard_normal(p))
    prop = par.beta + step
    ll_new = ctx.ll(par, beta=prop)
    delta = ll_new.sum() - state.ll.sum() + _log_prior_beta(ctx, prop) - _log_prior_beta(ctx, par.beta)
    acc = bool(metropolis_accept(delta, np.log(ctx.rng.random())))
    if acc:
        par.beta = prop
        state.ll = ll_new
    state.tally("beta", int(acc))
    if ctx.ridge_map is not None:
        _ridge_move(state, ctx, adapt)
    if adapt:
        g = _gain(state, ctx.config)
        state.beta_log_scale += g * (float(acc) - ctx.config.target_accept)
        state.beta_count += 1
        d = par.beta - state.beta_mean
        state.beta_mean = state.beta_mean + d / state.beta_count
        state.beta_m2 = state.beta_m2 + np.outer(d, par.beta - state.beta_mean)
        w = ctx.config.adapt_window
        if state.beta_count >= max(2 * p, w) and state.beta_count % w == 0:
            cov = state.beta_m2 / (state.beta_count - 1)
            cov = (2.38**2 / p) * cov + 1e-10 * np.eye(p)
            try:
                state.beta_chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                pass
    return state


def _ridge_move(state: ChainState, ctx: Context, adapt: bool) -> None:
    """Joint step (beta + d, v - A d) that keeps unit-level linear predictors nearly fixed.

    Frailties and covariate effects trade off along this direction; the move
    is a symmetric translation with unit Jacobian.
    """
    par = state.params
    p = par.beta.size
    d = np.exp(state.ridge_log_scale) * (state.ridge_chol @ ctx.rng.standard_normal(p))
    beta_new = par.beta + d
    v_new = par.v - ctx.ridge_map @ d
    ll_new = ctx.ll(par, beta=beta_new, v=v_new)
    delta = (ll_new.sum() - state.ll.sum() + _log_prior_beta(ctx, beta_new) - _log_prior_beta(ctx, par.beta)
             - (icar_quadratic_form(v_new, ctx.data.edges) - icar_quadratic_form(par.v, ctx.data.edges))
             / (2.0 * par.tau2))
    acc = bool(metropolis_accept(delta, np.log(ctx.rng.random())))
    if acc:
        par.beta, par.v, state.ll = beta_new, v_new, ll_new
    state.tally("beta_ridge", int(acc))
    if adapt:
        state.ridge_log_scale += _gain(state, ctx.config) * (float(acc) - ctx.config.target_accept)


def _ridge_map(data: ModelData) -> np.ndarray:
    counts = np.bincount(data.unit, minlength=data.m).astype(float)
    sums = np.zeros((data.m, data.X.shape[1]))
    np.add.at(sums, data.unit, data.X)
    A = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    comp_n = np.bincount(data.component, minlength=data.n_components).astype(float)
    comp_mean = np.zeros((data.n_components, A.shape[1]))
    np.add.at(comp_mean, data.component, A)
    return A - (comp_mean / comp_n[:, None])[data.component]


def update_tree(state: ChainState, ctx: Context, adapt: bool) -> ChainState:
    par = state.params
    L = par.tree.depth
    if L == 0:
        return state
    gamma = par.tree.gamma
    q = gamma.shape[1]
    data = ctx.data
    if ctx.config.use_likelihood and data.n:
        resid = data.log_t - linear_predictor(data, par)
        path = ldtfp.tree_path(resid, np.sqrt(par.sigma2), L)
    else:
        path = None
    for l in range(1, L + 1):
        lo, hi = 2 ** (l - 1) - 1, 2**l - 1
        if hi <= ctx.first_node:
            continue
        k = hi - lo
        scales = np.exp(state.node_log_scale[lo:hi])
        prop = gamma.copy()
        prop[lo:hi] += scales[:, None] * ctx.rng.standard_normal((k, q))
        prec = par.alpha * l * l
        dprior = -0.5 * prec * (np.sum(prop[lo:hi] ** 2, axis=1) - np.sum(gamma[lo:hi] ** 2, axis=1))
        if path is not None:
            ll_new = ctx.ll(par, gamma=prop)
            node_of = path.nodes[l - 1] - lo
            dll = np.bincount(node_of, weights=ll_new - state.ll, minlength=k)
        else:
            ll_new, node_of, dll = None, None, np.zeros(k)
        acc = metropolis_accept(dll + dprior, np.log(ctx.rng.random(k)))
        gamma[lo:hi][acc] = prop[lo:hi][acc]
        if ll_new is not None and acc.any():
            take = acc[node_of]
            state.ll = np.where(take, ll_new, state.ll)
        state.accepted.setdefault("tree", np.zeros(ldtfp.n_nodes(L)))
        state.proposed.setdefault("tree", np.zeros(ldtfp.n_nodes(L)))
        state.accepted["tree"][lo:hi] += acc
        state.proposed["tree"][lo:hi] += 1
        if adapt:
            state.node_log_scale[lo:hi] += _gain(state, ctx.config) * (acc - ctx.config.target_accept)
    return state


def update_sigma2(state: ChainState, ctx: Context, adapt: bool) -> ChainState:
    par = state.params
    cur = np.log(par.sigma2)
    prop = cur + np.exp(state.sigma_log_scale) * ctx.rng.standard_normal()
    ll_new = ctx.ll(par, sigma2=np.exp(prop))
    delta = (ll_new.sum() - state.ll.sum() + _log_prior_log_sigma2(ctx, prop)
             - _log_prior_log_sigma2(ctx, cur))
    acc = bool(metropolis_accept(delta, np.log(ctx.rng.random())))
    if acc:
        par.sigma2 = float(np.exp(prop))
        state.ll = ll_new
    state.tally("sigma2", int(acc))
    if adapt:
        state.sigma_log_scale += _gain(state, ctx.config) * (float(acc) - SCALAR_TARGET)
    return state


def alpha_conditional(gamma: np.ndarray, depth: int, priors: PriorConfig,
                      first_node: int = 0) -> tuple[float, float]:
    """(shape, rate) of the Gamma full conditional of alpha, over free nodes."""
    if depth == 0:
        return priors.a0, priors.b0
    lev2 = ldtfp.node_levels(depth).astype(float)[first_node:] ** 2
    g = gamma[first_node:]
    shape = priors.a0 + 0.5 * gamma.shape[1] * len(g)
    rate = priors.b0 + 0.5 * float(np.sum(lev2 * np.sum(g**2, axis=1)))
    return shape, rate


def gibbs_update_alpha(state: ChainState, priors: PriorConfig, rng: np.random.Generator,
                       first_node: int = 0) -> ChainState:
    shape, rate = alpha_conditional(state.params.tree.gamma, state.params.tree.depth, priors, first_node)
    state.params.alpha = float(rng.gamma(shape, 1.0 / rate))
    return state


def tree_scale_move(state: ChainState, ctx: Context, adapt: bool) -> ChainState:
    """Joint move (alpha e^-2u, gamma e^u) on the free nodes.

    alpha * ||gamma||^2 is unchanged, so the node prior's quadratic term
    cancels and, with the Jacobian, only the likelihood and the Gamma prior
    of alpha enter the ratio.
    """
    par = state.params
    if par.tree.depth == 0 or ctx.first_node >= par.tree.gamma.shape[0]:
        return state
    u = np.exp(state.tree_scale_log_step) * ctx.rng.standard_normal()
    gamma_new = par.tree.gamma.copy()
    gamma_new[ctx.first_node:] *= np.exp(u)
    alpha_new = par.alpha * np.exp(-2.0 * u)
    ll_new = ctx.ll(par, gamma=gamma_new)
    delta = (ll_new.sum() - state.ll.sum() - 2.0 * u * ctx.priors.a0
             - ctx.priors.b0 * (alpha_new - par.alpha))
    acc = bool(metropolis_accept(delta, np.log(ctx.rng.random())))
    if acc:
        par.tree = LdtfpTree(par.tree.depth, gamma_new)
        par.alpha = float(alpha_new)
        state.ll = ll_new
    state.tally("tree_scale", int(acc))
    if adapt:
        state.tree_scale_log_step += _gain(state, ctx.config) * (float(acc) - SCALAR_TARGET)
    return state


def tau2_conditional(v: np.ndarray, edges: np.ndarray, m: int, n_components: int,
                     priors: PriorConfig) -> tuple[float, float]:
    """(shape, rate) of the Gamma full conditional of the ICAR precision 1/tau^2."""
    return (priors.a_tau + 0.5 * (m - n_components),
            priors.b_tau + 0.5 * icar_quadratic_form(v, edges))


def gibbs_update_tau2(state: ChainState, data: ModelData, priors: PriorConfig,
                      rng: np.random.Generator) -> ChainState:
    shape, rate = tau2_conditional(state.params.v, data.edges, data.m, data.n_components, priors)
    state.params.tau2 = float(1.0 / rng.gamma(shape, 1.0 / rate))
    return state


def recentre_frailties(state: ChainState, ctx: Context) -> ChainState:
    """Project v onto sum-to-zero per component; the shift moves into the intercept.

    With one connected component the linear predictor is unchanged. With
    several, the mean shift is absorbed and the likelihood is re-evaluated.
    """
    par = state.params
    data = ctx.data
    if data.n_components == 1:
        s = par.v.mean()
        par.v = par.v - s
        par.beta = par.beta.copy()
        par.beta[0] += s
        return state
    sums = np.bincount(data.component, weights=par.v, minlength=data.n_components)
    counts = np.bincount(data.component, minlength=data.n_components)
    shift = sums / counts
    par.v = par.v - shift[data.component]
    par.beta = par.beta.copy()
    par.beta[0] += float(shift.mean())
    state.ll = ctx.ll(par)
    return state


def update_frailties(state: ChainState, ctx: Context, adapt: bool) -> ChainState:
    par = state.params
    data = ctx.data
    if data.m == 0:
        raise DataError("frailty update requires frailty_mode='icar'")
    for cls, rows in zip(ctx.colors, ctx.color_rows):
        v = par.v
        prop = v.copy()
        prop[cls] += np.exp(state.v_log_scale[cls]) * ctx.rng.standard_normal(cls.size)
        nb_sum = rows @ v
        mu = nb_sum / ctx.degree[cls]
        dprior = -ctx.degree[cls] / (2.0 * par.tau2) * ((prop[cls] - mu) ** 2 - (v[cls] - mu) ** 2)
        if ctx.config.use_likelihood and data.n:
            ll_new = ctx.ll(par, v=prop)
            dll = np.bincount(data.unit, weights=ll_new - state.ll, minlength=data.m)[cls]
        else:
            ll_new, dll = None, 0.0
        acc = metropolis_accept(dll + dprior, np.log(ctx.rng.random(cls.size)))
        newv = v.copy()
        newv[cls[acc]] = prop[cls[acc]]
        if data.n_components == 1 and acc.any():
            # second stage of a delayed-acceptance step: the class move, recentred
            # into the intercept, is kept with the beta-prior ratio at the shifted intercept
            shift = float(newv.mean())
            beta_new = par.beta.copy()
            beta_new[0] += shift
            log_g = _log_prior_beta(ctx, beta_new) - _log_prior_beta(ctx, par.beta)
            if np.log(ctx.rng.random()) < log_g:
                par.beta = beta_new
                newv = newv - shift
            else:
                newv, acc = v, np.zeros_like(acc)
        par.v = newv
        if ll_new is not None and acc.any():
            changed = np.zeros(data.m, bool)
            changed[cls[acc]] = True
            state.ll = np.where(changed[data.unit], ll_new, state.ll)
        state.accepted.setdefault("v", np.zeros(data.m))
        state.proposed.setdefault("v", np.zeros(data.m))
        state.accepted["v"][cls] += acc
        state.proposed["v"][cls] += 1
        if adapt:
            state.v_log_scale[cls] += _gain(state, ctx.config) * (acc - SCALAR_TARGET)
    return recentre_frailties(state, ctx)


def sweep(state: ChainState, ctx: Context) -> ChainState:
    cfg = ctx.config
    adapt = state.iteration < cfg.burn_in
    fixed = cfg.fixed
    if "beta" not in fixed:
        update_beta(state, ctx, adapt)
    if "tree" not in fixed:
        update_tree(state, ctx, adapt)
    if "sigma2" not in fixed:
        update_sigma2(state, ctx, adapt)
    if "alpha" not in fixed:
        gibbs_update_alpha(state, ctx.priors, ctx.rng, ctx.first_node)
        if "tree" not in fixed:
            tree_scale_move(state, ctx, adapt)
    if ctx.data.m:
        if "v" not in fixed:
            update_frailties(state, ctx, adapt)
        if "tau2" not in fixed:
            gibbs_update_tau2(state, ctx.data, ctx.priors, ctx.rng)
    state.iteration += 1
    return state


# --------------------------------------------------------------------------- initialization


def initial_params(data: ModelData, priors: PriorConfig) -> GaftParams:
    """Least-squares start on log t with a flat tree and zero frailties."""
    p, q = data.X.shape[1], data.Z.shape[1]
    if data.n > p:
        beta, *_ = np.linalg.lstsq(data.X, data.log_t, rcond=None)
        resid = data.log_t - data.X @ beta
        s2 = float(np.var(resid, ddof=1))
        if not s2 > 0:
            s2 = 1.0
    else:
        beta = priors.mean(p).copy()
        s2 = 1.0
    return GaftParams(beta, np.zeros(data.m), s2, s2, 1.0, LdtfpTree.zeros(data.depth, q))


def make_context(data: ModelData, priors: PriorConfig, config: McmcConfig, rng: np.random.Generator,
                 graph: AdjacencyGraph | None = None, first_node: int = 0) -> Context:
    p = data.X.shape[1]
    cov = priors.cov(p)
    ctx = Context(data, priors, config, rng, priors.mean(p), np.linalg.inv(cov), cov,
                  levels=ldtfp.node_levels(data.depth), first_node=first_node)
    if data.m:
        if graph is None:
            raise DataError("ICAR frailties require the adjacency graph")
        A = graph.adjacency_matrix()
        ctx.degree = A.sum(axis=1)
        ctx.colors = greedy_coloring(graph.neighbors())
        ctx.color_rows = [A[c] for c in ctx.colors]
        if config.use_likelihood and data.n and not {"beta", "v"} & set(config.fixed):
            ctx.ridge_map = _ridge_map(data)
    return ctx


def init_state(params: GaftParams, ctx: Context) -> ChainState:
    data = ctx.data
    p = params.beta.size
    if data.n > p:
        s2 = params.sigma2
        try:
            cov = s2 * np.linalg.inv(data.X.T @ data.X)
        except np.linalg.LinAlgError:
            cov = ctx.prior_cov
    else:
        cov = ctx.prior_cov
    if not ctx.config.use_likelihood:
        cov = ctx.prior_cov
    chol = np.linalg.cholesky((2.38**2 / p) * cov + 1e-12 * np.eye(p))
    n_nodes = ldtfp.n_nodes(params.tree.depth)
    state = ChainState(params, ctx.ll(params), beta_chol=chol, beta_mean=params.beta.copy(),
                       beta_m2=np.zeros((p, p)), node_log_scale=np.full(n_nodes, np.log(0.5)),
                       v_log_scale=np.full(data.m, np.log(0.3)), ridge_chol=chol.copy())
    if not np.all(np.isfinite(state.ll)):
        raise DataError("non-finite log-likelihood at the initial state")
    return state


# --------------------------------------------------------------------------- running chains


@dataclass
class ChainSamples:
    beta: np.ndarray  # (K, p)
    v: np.ndarray  # (K, m)
    tau2: np.ndarray  # (K,)
    sigma2: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray  # (K, n_nodes, q)
    iterations: np.ndarray  # (K,) 1-based sweep index of each kept draw
    acceptance: dict


@dataclass
class PosteriorSamples:
    chains: list[ChainSamples]
    spec: ModelSpec
    config: McmcConfig
    priors: PriorConfig
    unit_ids: tuple[str, ...] = ()
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        lengths = {len(c.tau2) for c in self.chains}
        if len(lengths) > 1:
            raise ValueError("all chains must have the same number of draws")

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def n_draws(self) -> int:
        return len(self.chains[0].tau2)

    def stacked(self, block: str) -> np.ndarray:
        """(chains, draws, ...) array for one block."""
        return np.stack([getattr(c, block) for c in self.chains])

    def pooled(self, block: str) -> np.ndarray:
        a = self.stacked(block)
        return a.reshape((-1,) + a.shape[2:])

    def draw(self, chain: int, k: int) -> GaftParams:
        c = self.chains[chain]
        return GaftParams(c.beta[k].copy(), c.v[k].copy(), float(c.tau2[k]), float(c.sigma2[k]),
                          float(c.alpha[k]), LdtfpTree(self.spec.tree_depth, c.gamma[k].copy()))

    def iter_draws(self):
        for ci in range(self.n_chains):
            for k in range(self.n_draws):
                yield self.draw(ci, k)

    def scalar_parameters(self) -> dict[str, np.ndarray]:
        """Named (chains, draws) arrays for convergence checks."""
        out = {}
        beta = self.stacked("beta")
        names = ("intercept",) + tuple(self.spec.covariate_names)
        for j, nm in enumerate(names):
            out[f"beta[{nm}]"] = beta[:, :, j]
        out["sigma2"] = self.stacked("sigma2")
        out["alpha"] = self.stacked("alpha")
        if self.spec.frailty_mode == "icar":
            out["tau2"] = self.stacked("tau2")
        return out


def run_chain(chain: int, data: ModelData, graph, priors: PriorConfig, config: McmcConfig,
              init: GaftParams | None = None, first_node: int = 0) -> ChainSamples:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(chain,)))
    ctx = make_context(data, priors, config, rng, graph, first_node)
    params = (init or initial_params(data, priors)).copy()
    if first_node and np.any(params.tree.gamma[:first_node] != 0):
        raise DataError("root node coefficients must be zero when median_zero is set")
    state = init_state(params, ctx)
    K = config.kept
    p, m = params.beta.size, data.m
    nn, q = params.tree.gamma.shape
    out = ChainSamples(np.empty((K, p)), np.empty((K, m)), np.empty(K), np.empty(K), np.empty(K),
                       np.empty((K, nn, q)), np.empty(K, dtype=np.int64), {})
    k = 0
    for it in range(1, config.n_iter + 1):
        sweep(state, ctx)
        if config.progress_every and it % config.progress_every == 0:
            print(f"chain={chain} iter={it}", file=sys.stderr, flush=True)
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            par = state.params
            out.beta[k] = par.beta
            out.v[k] = par.v
            out.tau2[k] = par.tau2
            out.sigma2[k] = par.sigma2
            out.alpha[k] = par.alpha
            out.gamma[k] = par.tree.gamma
            out.iterations[k] = it
            k += 1
    out.acceptance = {b: (np.asarray(state.accepted[b]) / np.maximum(state.proposed[b], 1)).tolist()
                      for b in state.accepted}
    return out


def _run_chain_args(args):
    return run_chain(*args)


def n_workers(n_chains: int) -> int:
    env = os.environ.get(THREADS_ENV)
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(n_chains, cap))


def run_mcmc(dataset: Dataset, graph: AdjacencyGraph | None, spec: ModelSpec, priors: PriorConfig,
             config: McmcConfig, init: GaftParams | None = None) -> PosteriorSamples:
    """Run ``config.n_chains`` independent chains; chain c seeds from (seed, c).

    Unless the spec already carries tree-design constants, baseline covariates
    are standardized with the dataset's mean and sd; the returned samples
    carry the spec actually used.
    """
    spec = spec.standardized_for(dataset)
    data = build_model_data(dataset, spec, graph)
    if data.n == 0 and config.use_likelihood:
        raise DataError("dataset is empty")
    jobs = [(c, data, graph, priors, config, init, spec.first_free_node) for c in range(config.n_chains)]
    workers = n_workers(config.n_chains)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chains = list(ex.map(_run_chain_args, jobs))
    else:
        chains = [run_chain(*j) for j in jobs]
    return PosteriorSamples(chains, spec, config, priors,
                            tuple(graph.unit_ids) if (graph is not None and data.m) else (),
                            tuple(spec.covariate_names))


# --------------------------------------------------------------------------- diagnostics


@dataclass(frozen=True)
class RhatResult:
    rhat: float
    zero_variance: bool = False


def split_rhat(chains) -> RhatResult:
    """Split-R-hat of a (chains, draws) array."""
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("gelman_rubin needs at least 2 chains")
    if x.shape[1] < 10:
        raise ValueError("gelman_rubin needs at least 10 draws per chain")
    half = x.shape[1] // 2
    parts = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    n = parts.shape[1]
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return RhatResult(1.0, True) if B == 0 else RhatResult(float("inf"), True)
    var_plus = (n - 1) / n * W + B / n
    return RhatResult(float(np.sqrt(var_plus / W)))


def gelman_rubin(samples) -> dict[str, RhatResult]:
    """Split-R-hat per scalar parameter of a PosteriorSamples or a name -> array dict."""
    params = samples.scalar_parameters() if isinstance(samples, PosteriorSamples) else samples
    return {name: split_rhat(arr) for name, arr in params.items()}


# --------------------------------------------------------------------------- trace export


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _block_columns(samples: PosteriorSamples, block: str) -> list[str]:
    if block == "beta":
        return ["intercept"] + list(samples.spec.covariate_names)
    if block == "v":
        ids = samples.unit_ids or tuple(f"v{i}" for i in range(samples.chains[0].v.shape[1]))
        return [f"v[{u}]" for u in ids]
    if block == "gamma":
        names = ["intercept"] + list(samples.spec.baseline_covariate_names)
        cols = []
        for l in range(1, samples.spec.tree_depth + 1):
            for k in range(1, 2 ** (l - 1) + 1):
                cols.extend(f"gamma[{l},{k}][{nm}]" for nm in names)
        return cols
    return [block]


def export_traces(samples: PosteriorSamples, path) -> list[Path]:
    """Write one CSV per block with columns chain, iteration, parameters..."""
    if samples.n_chains == 0 or samples.n_draws == 0:
        raise ValueError("no samples to export")
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    blocks = ["beta", "sigma2", "alpha", "gamma"]
    if samples.spec.frailty_mode == "icar":
        blocks[1:1] = ["v", "tau2"]
    written = []
    for block in blocks:
        cols = _block_columns(samples, block)
        f = out_dir / f"{block}.csv"
        with open(f, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "iteration"] + cols)
            for ci, ch in enumerate(samples.chains):
                arr = getattr(ch, block).reshape(len(ch.iterations), -1)
                for k in range(arr.shape[0]):
                    w.writerow([ci, int(ch.iterations[k])] + [_fmt(x) for x in arr[k]])
        written.append(f)
    return written


def read_trace(path) -> tuple[list[str], np.ndarray]:
    """Parse a trace CSV into (header, float array including chain/iteration columns)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]])
