"""Posterior summaries: HPD intervals, CPO/LPML, Bayes factors, fit tables."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import ldtfp
from .dataset import AdjacencyGraph, DataError, Dataset, ScalingMeta
from .gaft import build_model_data, pointwise_log_likelihood
from .mcmc import PosteriorSamples, gelman_rubin

MIN_HPD_DRAWS = 50
BF_DISPLAY_CAP = 100.0


def hpd_interval(draws, prob: float = 0.90) -> tuple[float, float]:
    """Shortest interval spanning ceil(prob * n) sorted draws (Chen-Shao)."""
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    n = x.size
    if n < MIN_HPD_DRAWS:
        raise DataError(f"HPD interval needs at least {MIN_HPD_DRAWS} draws, got {n}")
    if not 0 < prob < 1:
        raise DataError("prob must be in (0, 1)")
    k = int(math.ceil(prob * n - 1e-9))
    widths = x[k - 1:] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


# --------------------------------------------------------------------------- coefficients


@dataclass(frozen=True)
class CoefficientSummary:
    name: str
    mean: float
    sd: float
    hpd90: tuple[float, float]
    hpd95: tuple[float, float]
    units: str = ""

    @property
    def sig90(self) -> bool:
        return not self.hpd90[0] <= 0.0 <= self.hpd90[1]

    @property
    def sig95(self) -> bool:
        return not self.hpd95[0] <= 0.0 <= self.hpd95[1]

    @property
    def time_ratio(self) -> float:
        """Multiplicative change in median time per unit increase."""
        return float(np.exp(self.mean))

    def to_dict(self) -> dict:
        return {"name": self.name, "mean": self.mean, "sd": self.sd,
                "hpd90": list(self.hpd90), "hpd95": list(self.hpd95),
                "sig90": self.sig90, "sig95": self.sig95, "time_ratio": self.time_ratio,
                "units": self.units}


def coefficient_draws(samples: PosteriorSamples, scaling: ScalingMeta | None = None) -> np.ndarray:
    """Pooled beta draws, mapped to original covariate units when ``scaling`` is given.

    A coefficient b on (x - o) / d is b / d per original unit; the intercept
    picks up -sum(b * o / d).
    """
    b = samples.pooled("beta").copy()
    if scaling is None:
        return b
    for j, name in enumerate(samples.covariate_names, start=1):
        s = scaling.get(name)
        b[:, 0] -= b[:, j] * s.offset / s.divisor
        b[:, j] = b[:, j] / s.divisor
    return b


def posterior_summary(samples: PosteriorSamples, scaling: ScalingMeta | None = None) -> list[CoefficientSummary]:
    b = coefficient_draws(samples, scaling)
    names = ("intercept",) + tuple(samples.covariate_names)
    out = []
    for j, name in enumerate(names):
        col = b[:, j]
        units = ""
        if scaling is not None and j > 0:
            units = scaling.get(name).units
        # moments of the shifted draws: exact for constant chains, less cancellation otherwise
        d = col - col[0]
        out.append(CoefficientSummary(name, float(col[0] + d.mean()), float(d.std(ddof=1)) if col.size > 1 else 0.0,
                                      hpd_interval(col, 0.90), hpd_interval(col, 0.95), units))
    return out


# --------------------------------------------------------------------------- CPO / LPML


@dataclass(frozen=True)
class CpoResult:
    log_cpo: np.ndarray
    lpml: float
    heavy_weight_units: tuple[int, ...] = ()  # records whose largest importance weight exceeds half

    @property
    def cpo(self) -> np.ndarray:
        return np.exp(self.log_cpo)


def cpo_from_loglik(ll) -> CpoResult:
    """CPO from an (S draws, n records) matrix of pointwise log-likelihoods."""
    ll = np.atleast_2d(np.asarray(ll, dtype=float))
    if not np.all(np.isfinite(ll)):
        raise DataError("non-finite pointwise log-likelihood contributions")
    S = ll.shape[0]
    lse = logsumexp(-ll, axis=0)
    log_cpo = np.log(S) - lse
    max_w = np.exp(np.max(-ll, axis=0) - lse)
    heavy = tuple(int(i) for i in np.flatnonzero(max_w > 0.5)) if S > 1 else ()
    return CpoResult(log_cpo, float(log_cpo.sum()), heavy)


def pointwise_loglik_matrix(samples: PosteriorSamples, dataset: Dataset,
                            graph: AdjacencyGraph | None = None) -> np.ndarray:
    data = build_model_data(dataset, samples.spec, graph if samples.spec.frailty_mode == "icar" else None)
    rows = [pointwise_log_likelihood(data, par) for par in samples.iter_draws()]
    return np.vstack(rows)


def cpo_lpml(samples: PosteriorSamples, dataset: Dataset, graph: AdjacencyGraph | None = None) -> CpoResult:
    return cpo_from_loglik(pointwise_loglik_matrix(samples, dataset, graph))


def model_compare(lpml_a: float, lpml_b: float) -> dict:
    """Difference of a over b, and that difference as a percentage of |a|."""
    if not (np.isfinite(lpml_a) and np.isfinite(lpml_b)):
        raise DataError("LPML values must be finite")
    delta = lpml_a - lpml_b
    if delta == 0:
        return {"delta": 0.0, "pct_improvement": 0.0}
    if lpml_a == 0:
        raise DataError("percentage improvement undefined when lpml_a is 0")
    return {"delta": float(delta), "pct_improvement": float(delta / abs(lpml_a) * 100.0)}


# --------------------------------------------------------------------------- Bayes factors


@dataclass(frozen=True)
class BayesFactor:
    covariate: str
    log_bf10: float | None
    note: str = ""

    @property
    def bf10(self) -> float | None:
        return None if self.log_bf10 is None else float(np.exp(min(self.log_bf10, 700.0)))

    def display(self) -> str:
        if self.log_bf10 is None:
            return "n/a"
        if self.log_bf10 > math.log(BF_DISPLAY_CAP):
            return f"> {BF_DISPLAY_CAP:g}"
        return f"{self.bf10:.3g}"

    def to_dict(self) -> dict:
        return {"covariate": self.covariate, "log_bf10": self.log_bf10, "bf10": self.bf10,
                "display": self.display(), "note": self.note}


def whitened_node_coefficients(samples: PosteriorSamples, j: int) -> np.ndarray:
    """(S, K) draws of gamma_{l,k,j} * sqrt(alpha) * l over the free nodes.

    Under the prior these are i.i.d. N(0, 1) and independent of alpha, so
    'covariate j has no baseline effect' is the point u = 0 with an exact
    standard-normal prior ordinate.
    """
    spec = samples.spec
    first = spec.first_free_node
    levels = ldtfp.node_levels(spec.tree_depth)[first:].astype(float)
    gamma = samples.pooled("gamma")[:, first:, j]
    alpha = samples.pooled("alpha")
    return gamma * np.sqrt(alpha)[:, None] * levels[None, :]


def _mvn_log_density_at_zero(draws: np.ndarray) -> float | None:
    mu = draws.mean(axis=0)
    cov = np.atleast_2d(np.cov(draws, rowvar=False))
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0 or not np.isfinite(logdet) or np.linalg.cond(cov) > 1e12:
        return None
    k = mu.size
    return float(-0.5 * (k * np.log(2 * np.pi) + logdet + mu @ np.linalg.solve(cov, mu)))


def bayes_factor_baseline(samples: PosteriorSamples, covariates=None) -> list[BayesFactor]:
    """Savage-Dickey BF_10 for 'every tree coefficient of covariate j is zero'.

    Works on the whitened coefficients, whose prior ordinate at 0 is exact;
    the posterior ordinate comes from a moment-matched multivariate normal.
    """
    spec = samples.spec
    if spec.tree_depth < 1:
        raise DataError("Bayes factors for baseline effects need tree depth >= 1")
    names = tuple(spec.baseline_covariate_names)
    wanted = names if covariates is None else tuple(covariates)
    out = []
    for name in wanted:
        if name not in names:
            raise DataError(f"{name!r} is not a baseline covariate")
        u = whitened_node_coefficients(samples, names.index(name) + 1)
        K = u.shape[1]
        if K == 0:
            out.append(BayesFactor(name, None, "no free tree nodes"))
            continue
        log_prior0 = -0.5 * K * np.log(2 * np.pi)
        log_post0 = _mvn_log_density_at_zero(u) if u.shape[0] > K else None
        if log_post0 is None:
            out.append(BayesFactor(name, None, "singular posterior covariance"))
        else:
            out.append(BayesFactor(name, log_prior0 - log_post0))
    return out


# --------------------------------------------------------------------------- frailties


def frailty_summary(samples: PosteriorSamples) -> dict:
    if samples.spec.frailty_mode != "icar":
        raise DataError("frailty summary requires frailty_mode='icar'")
    v = samples.pooled("v")
    return {"tau2_mean": float(samples.pooled("tau2").mean()),
            "v_mean": {u: float(x) for u, x in zip(samples.unit_ids, v.mean(axis=0))}}


# --------------------------------------------------------------------------- fit summary


@dataclass
class FitSummary:
    coefficients: list[CoefficientSummary]
    lpml: float
    log_cpo: list[float]
    unit_ids: list[str]
    bayes_factors: list[BayesFactor] = field(default_factory=list)
    frailty_variance_mean: float | None = None
    frailty_means: dict = field(default_factory=dict)
    rhat: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    frailty_mode: str = "icar"
    config: dict = field(default_factory=dict)

    @property
    def cpo(self) -> list[float]:
        return [float(np.exp(x)) for x in self.log_cpo]

    @property
    def max_rhat(self) -> float:
        return max(self.rhat.values()) if self.rhat else 1.0

    def to_dict(self) -> dict:
        return {
            "frailty_mode": self.frailty_mode,
            "coefficients": [c.to_dict() for c in self.coefficients],
            "lpml": self.lpml,
            "cpo": dict(zip(self.unit_ids, self.cpo)),
            "bayes_factors": [b.to_dict() for b in self.bayes_factors],
            "frailty_variance_mean": self.frailty_variance_mean,
            "frailty_means": self.frailty_means,
            "rhat": self.rhat,
            "warnings": self.warnings,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def summarize_fit(samples: PosteriorSamples, dataset: Dataset, graph: AdjacencyGraph | None = None,
                  scaling: ScalingMeta | None = None, convergence_params=None) -> FitSummary:
    cp = cpo_from_loglik(pointwise_loglik_matrix(samples, dataset, graph))
    ids = dataset.unit_ids
    warnings = [f"CPO for unit {ids[i]} is dominated by a single draw" for i in cp.heavy_weight_units]
    bfs = bayes_factor_baseline(samples) if samples.spec.tree_depth >= 1 and samples.spec.baseline_covariate_names else []
    rhat = {}
    if samples.n_chains >= 2 and samples.n_draws >= 10:
        rhat = {k: v.rhat for k, v in gelman_rubin(samples).items()}
    tau2 = None
    vmeans = {}
    if samples.spec.frailty_mode == "icar":
        fs = frailty_summary(samples)
        tau2, vmeans = fs["tau2_mean"], fs["v_mean"]
    return FitSummary(posterior_summary(samples, scaling), cp.lpml, cp.log_cpo.tolist(), list(ids), bfs,
                      tau2, vmeans, rhat, warnings, samples.spec.frailty_mode,
                      {"mcmc": samples.config.to_dict(), "priors": samples.priors.to_dict(),
                       "spec": samples.spec.to_dict()})


def _stars(c: CoefficientSummary) -> str:
    return "**" if c.sig95 else ("*" if c.sig90 else "")


def format_table(summary: FitSummary) -> str:
    """Plain-text coefficient table: mean (SD) with stars, and the 90% HPD."""
    rows = [("Variable", "Mean (Std. dev)", "90% HPD")]
    for c in summary.coefficients:
        rows.append((c.name, f"{c.mean:.4f} ({c.sd:.4f}) {_stars(c)}".rstrip(),
                     f"[{c.hpd90[0]:.4f}, {c.hpd90[1]:.4f}]"))
    rows.append(("LPML", f"{summary.lpml:.2f}", ""))
    if summary.frailty_variance_mean is not None:
        rows.append(("tau2 (mean)", f"{summary.frailty_variance_mean:.4f}", ""))
    for b in summary.bayes_factors:
        rows.append((f"BF baseline[{b.covariate}]", b.display(), ""))
    w = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(r[i].ljust(w[i]) for i in range(3)).rstrip() for r in rows]
    lines.append("* 90% HPD excludes 0; ** 95% HPD excludes 0")
    return "\n".join(lines) + "\n"
