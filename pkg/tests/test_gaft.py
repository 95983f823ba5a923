import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from spatial_restore.dataset import DataError, Dataset, UnitRecord, build_adjacency, lattice_adjacency
from spatial_restore.gaft import (
    GaftParams,
    ModelSpec,
    PriorConfig,
    baseline_survival,
    build_model_data,
    gamma_logpdf,
    icar_covariance,
    icar_log_prior,
    log_prior_total,
    median_time_ratio,
    pointwise_log_likelihood,
    sample_icar,
    simulate_dataset,
    total_log_likelihood,
    tree_log_prior,
)
from spatial_restore.ldtfp import LdtfpTree, n_nodes


def _dataset(t, cens, X, ids=None):
    ids = ids or [f"u{i}" for i in range(len(t))]
    names = tuple(f"x{j}" for j in range(X.shape[1]))
    recs = tuple(UnitRecord(ids[i], float(t[i]), bool(cens[i]), tuple(map(float, X[i]))) for i in range(len(t)))
    return Dataset(recs, names)


def _params(beta, depth=0, q=1, sigma2=1.0, v=(), gamma=None, tau2=1.0, alpha=1.0):
    g = np.zeros((n_nodes(depth), q)) if gamma is None else np.asarray(gamma, float)
    return GaftParams(np.asarray(beta, float), np.asarray(v, float), tau2, sigma2, alpha, LdtfpTree(depth, g))


def _lognormal_oracle(t, cens, X, beta, sigma2):
    mu = beta[0] + X @ beta[1:]
    s = np.sqrt(sigma2)
    z = (np.log(t) - mu) / s
    obs = -np.log(t) - np.log(s) - 0.5 * np.log(2 * np.pi) - 0.5 * z**2
    return np.where(cens, stats.norm.logsf(z), obs).sum()


def test_lognormal_reduction_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, p = int(rng.integers(1, 30)), int(rng.integers(0, 4))
        X = rng.normal(size=(n, p))
        beta = rng.normal(size=p + 1)
        s2 = rng.uniform(0.1, 4)
        t = np.exp(rng.normal(size=n) * 1.5 + 1)
        cens = rng.random(n) < 0.3
        ds = _dataset(t, cens, X)
        spec = ModelSpec(ds.covariate_names, frailty_mode="none", tree_depth=0)
        got = total_log_likelihood(ds, _params(beta, 0, p + 1, s2), spec)
        assert got == pytest.approx(_lognormal_oracle(t, cens, X, beta, s2), abs=1e-10, rel=1e-12)


def test_censoring_near_zero_gives_zero_loglik():
    X = np.zeros((4, 1))
    ds = _dataset([1e-300] * 4, [True] * 4, X)
    spec = ModelSpec(ds.covariate_names, frailty_mode="none", tree_depth=3)
    params = _params([0.0, 0.0], 3, 2, gamma=np.random.default_rng(1).normal(size=(7, 2)))
    assert total_log_likelihood(ds, params, spec) == pytest.approx(0.0, abs=1e-12)


def test_duplicating_a_record_adds_its_contribution():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(5, 2))
    t, cens = np.exp(rng.normal(size=5)), np.array([0, 1, 0, 0, 1], bool)
    ds = _dataset(t, cens, X)
    spec = ModelSpec(ds.covariate_names, frailty_mode="none", tree_depth=2, standardize_baseline=False)
    params = _params(rng.normal(size=3), 2, 3, 0.7, gamma=rng.normal(size=(3, 3)))
    data = build_model_data(ds, spec)
    pw = pointwise_log_likelihood(data, params)
    dup = _dataset(np.append(t, t[1]), np.append(cens, cens[1]), np.vstack([X, X[1]]), [f"u{i}" for i in range(6)])
    assert total_log_likelihood(dup, params, spec) == pytest.approx(pw.sum() + pw[1], abs=1e-12)


def test_parameter_dimension_mismatch():
    ds = _dataset([1.0, 2.0], [False, False], np.zeros((2, 1)))
    spec = ModelSpec(ds.covariate_names, frailty_mode="none", tree_depth=0)
    with pytest.raises(DataError):
        total_log_likelihood(ds, _params([0.0, 0.0, 0.0], 0, 2), spec)


# --------------------------------------------------------------------------- ICAR


def _path():
    return build_adjacency(["A", "B", "C"], [("A", "B"), ("B", "C")])


def test_icar_examples():
    g = _path()
    assert icar_log_prior([1.0, 0.0, -1.0], 1.0, g) == pytest.approx(-1.0)
    assert icar_log_prior(np.zeros(3), 2.5, g) == pytest.approx(-0.5 * 2 * np.log(2.5))
    with pytest.raises(DataError, match="sum-to-zero"):
        icar_log_prior([1.0, 0.0, 0.0], 1.0, g)


def test_icar_single_site_conditionals():
    rng = np.random.default_rng(3)
    g = lattice_adjacency(3, 4)
    A = g.adjacency_matrix()
    deg = A.sum(axis=1)
    tau2 = 0.6
    v = rng.normal(size=g.m)
    v -= v.mean()
    for i in range(g.m):
        mean = A[i] @ v / deg[i]
        var = tau2 / deg[i]
        # log joint as a function of v_i is quadratic; its curvature and mode give the conditional
        def f(x):
            w = v.copy()
            w[i] = x
            return icar_log_prior(w, tau2, g, check_constraint=False)
        h = 0.5  # exact for a quadratic, and wide enough to avoid roundoff
        x0 = v[i]
        d1 = (f(x0 + h) - f(x0 - h)) / (2 * h)
        d2 = (f(x0 + h) - 2 * f(x0) + f(x0 - h)) / h**2
        assert -1 / d2 == pytest.approx(var, rel=1e-6)
        assert x0 - d1 / d2 == pytest.approx(mean, abs=1e-8)


def test_icar_build_errors():
    ds = _dataset([1.0], [False], np.zeros((1, 1)), ["A"])
    spec = ModelSpec(ds.covariate_names, frailty_mode="icar", tree_depth=0)
    with pytest.raises(DataError, match="at least 2"):
        build_model_data(ds, spec, build_adjacency(["A"], []))
    g = build_adjacency(["A", "B", "C"], [("A", "B")])
    with pytest.raises(DataError, match="without neighbours"):
        build_model_data(ds, spec, g)


def test_sample_icar_sums_to_zero_and_has_pinv_covariance():
    g = lattice_adjacency(3, 3)
    rng = np.random.default_rng(4)
    draws = np.array([sample_icar(g, 0.5, rng) for _ in range(20000)])
    assert np.abs(draws.sum(axis=1)).max() < 1e-10
    S = np.cov(draws.T)
    ref = icar_covariance(g, 0.5)
    assert np.linalg.norm(S - ref) / np.linalg.norm(ref) < 0.05


# --------------------------------------------------------------------------- priors


def _spec_for_prior(median_zero):
    return ModelSpec(("a", "b"), frailty_mode="icar", tree_depth=2, median_zero=median_zero)


def test_log_prior_total_matches_components():
    rng = np.random.default_rng(5)
    g = _path()
    priors = PriorConfig(beta_mean=np.array([0.5, -1, 2]), beta_cov=np.diag([1.0, 2.0, 3.0]),
                         a_tau=2, b_tau=1.5, a0=3, b0=0.5, a_sigma=1.2, b_sigma=2.2)
    for median_zero in (False, True):
        spec = _spec_for_prior(median_zero)
        gamma = rng.normal(size=(3, 3))
        if median_zero:
            gamma[0] = 0
        v = np.array([0.3, -0.1, -0.2])
        params = _params(rng.normal(size=3), 2, 3, 0.8, v, gamma, tau2=0.4, alpha=1.7)
        expect = stats.multivariate_normal(priors.beta_mean, priors.beta_cov).logpdf(params.beta)
        expect += -icar_prior_quadratic(v) / (2 * 0.4) - np.log(0.4)  # m - c = 2
        expect += stats.gamma(2, scale=1 / 1.5).logpdf(1 / 0.4)
        expect += stats.gamma(1.2, scale=1 / 2.2).logpdf(1 / 0.8)
        expect += stats.gamma(3, scale=2).logpdf(1.7)
        levels = [1, 2, 2]
        start = 1 if median_zero else 0
        for k in range(start, 3):
            sd = 1 / np.sqrt(1.7 * levels[k] ** 2)
            expect += stats.norm(0, sd).logpdf(gamma[k]).sum()
        assert log_prior_total(params, priors, spec, g) == pytest.approx(expect, abs=1e-12)


def icar_prior_quadratic(v):
    return (v[0] - v[1]) ** 2 + (v[1] - v[2]) ** 2


def test_median_zero_rejects_nonzero_root():
    gamma = np.zeros((3, 3))
    gamma[0, 0] = 0.1
    params = _params([0, 0, 0], 2, 3, v=[0, 0, 0], gamma=gamma)
    with pytest.raises(DataError, match="root"):
        log_prior_total(params, PriorConfig(), _spec_for_prior(True), _path())
    log_prior_total(params, PriorConfig(), _spec_for_prior(False), _path())


def test_doubling_b_tau_shifts_only_tau_term():
    spec = _spec_for_prior(True)
    params = _params([0.1, 0.2, 0.3], 2, 3, v=[0.1, 0.0, -0.1], tau2=0.25)
    a = log_prior_total(params, PriorConfig(a_tau=2, b_tau=1), spec, _path())
    b = log_prior_total(params, PriorConfig(a_tau=2, b_tau=2), spec, _path())
    # Gamma(a, b) log-density in the rate: a log b - b x
    assert b - a == pytest.approx(2 * np.log(2) - (1 / 0.25) * 1, abs=1e-12)


def test_prior_mode_evaluation():
    spec = ModelSpec(("a",), frailty_mode="none", tree_depth=1, median_zero=False)
    priors = PriorConfig(beta_mean=np.array([1.0, 2.0]), beta_cov=np.eye(2))
    params = _params([1.0, 2.0], 1, 2)
    lp = log_prior_total(params, priors, spec)
    expect = -np.log(2 * np.pi) + gamma_logpdf(1.0, 1, 1) * 2 + 2 * 0.5 * np.log(1 / (2 * np.pi))
    assert lp == pytest.approx(expect, abs=1e-12)


def test_non_positive_variance_rejected():
    with pytest.raises(ValueError):
        _params([0.0], sigma2=0.0)


def test_tree_prior_excludes_root():
    gamma = np.ones((3, 2))
    full = tree_log_prior(gamma, 2.0, 2)
    tail = tree_log_prior(gamma, 2.0, 2, first_node=1)
    root = stats.norm(0, 1 / np.sqrt(2.0)).logpdf(1.0) * 2
    assert full - tail == pytest.approx(root)


# --------------------------------------------------------------------------- survival


def test_baseline_survival_reductions():
    spec = ModelSpec(("x",), frailty_mode="none", tree_depth=0)
    params = _params([0.0, 0.0], 0, 2)
    for t in [0.1, 1.0, 3.7]:
        assert baseline_survival(t, [5.0], params, spec) == pytest.approx(stats.norm.sf(np.log(t)), abs=1e-14)
    assert baseline_survival(1e-200, [5.0], params, spec) == pytest.approx(1.0)
    with pytest.raises(DataError):
        baseline_survival(0.0, [1.0], params, spec)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 4))
def test_baseline_survival_monotone(seed, depth):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(("x", "y"), frailty_mode="none", tree_depth=depth, median_zero=False)
    params = _params(rng.normal(size=3), depth, 3, rng.uniform(0.2, 2), gamma=rng.normal(0, 2, (n_nodes(depth), 3)))
    s = baseline_survival(np.geomspace(1e-3, 1e3, 400), rng.normal(size=2), params, spec)
    assert np.all(np.diff(s) <= 1e-15) and np.all((s >= 0) & (s <= 1))


def test_median_time_ratio():
    assert median_time_ratio(0.013) == pytest.approx(1.013, abs=1e-3)
    # the ratio is the shift of the baseline median under a unit covariate change
    spec = ModelSpec(("wind",), frailty_mode="none", tree_depth=0)
    params = _params([0.4, 0.013], 0, 2, 0.3)
    med = lambda w: np.exp(0.4 + 0.013 * w)  # noqa: E731
    assert baseline_survival(med(10.0), [10.0], params, spec) == pytest.approx(0.5)
    assert med(11.0) / med(10.0) == pytest.approx(median_time_ratio(0.013))


# --------------------------------------------------------------------------- simulation


def _gen(rng, n):
    return rng.normal(size=(n, 2))


def test_simulate_deterministic_and_normal_at_flat_tree():
    spec = ModelSpec(("a", "b"), frailty_mode="none", tree_depth=3)
    beta = np.array([1.0, 0.5, -0.3])
    params = _params(beta, 3, 3, 0.4)
    a = simulate_dataset(spec, params, None, _gen, n=5000, seed=9)
    b = simulate_dataset(spec, params, None, _gen, n=5000, seed=9)
    assert a == b
    X = a.covariate_matrix()
    resid = np.log(a.event_times) - beta[0] - X @ beta[1:]
    assert stats.kstest(resid, stats.norm(0, np.sqrt(0.4)).cdf).pvalue > 0.01


def test_simulate_icar_uses_true_frailties_and_censors():
    g = lattice_adjacency(2, 3)
    spec = ModelSpec(("a", "b"), frailty_mode="icar", tree_depth=0)
    v = np.array([1.0, -1.0, 0.5, -0.5, 0.2, -0.2])
    params = _params([0.0, 0.0, 0.0], 0, 3, 1e-10, v)
    ds = simulate_dataset(spec, params, g, _gen, seed=1, censor_time=2.0)
    t_true = np.exp(v)
    np.testing.assert_allclose(ds.event_times, np.minimum(t_true, 2.0), rtol=1e-4)
    assert list(ds.censored) == list(t_true > 2.0)
    with pytest.raises(DataError):
        simulate_dataset(spec, params, g, _gen, n=4)


def test_params_json_round_trip():
    params = _params([1.0, 2.0], 2, 2, 0.5, [0.1, -0.1], np.arange(6.0).reshape(3, 2), 0.3, 1.5)
    again = GaftParams.from_dict(__import__("json").loads(params.to_json()))
    np.testing.assert_array_equal(again.tree.gamma, params.tree.gamma)
    assert (again.tau2, again.sigma2, again.alpha) == (0.3, 0.5, 1.5)
