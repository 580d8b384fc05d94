import math
import warnings

import numpy as np
import pytest

from hierform.infer import (
    ConstantParameterWarning,
    Draws,
    SamplerConfig,
    SamplerError,
    effects_grid,
    ess,
    fit_model,
    gpd_fit,
    ic_compare,
    loo,
    map_estimate,
    posterior_predict,
    psis_weights,
    raw_from_draws,
    sample_chains,
    split_rhat,
    summarize,
    waic,
)
from hierform.infer.draws import summarize_column
from hierform.density import Model
from hierform.design import assemble
from hierform.modelspec import bf, validate
from hierform.tabular import factor, from_columns


def std_normal(q):
    return -0.5 * float(q @ q), -q


def pooled(chains):
    return np.concatenate([c.draws for c in chains])


# --------------------------------------------------------------------------
# sampler


def test_standard_normal_mean_and_acceptance():
    chains = sample_chains(std_normal, 10, SamplerConfig(seed=1))
    x = pooled(chains)
    assert x.shape == (4000, 10)
    assert np.all(np.abs(x.mean(axis=0)) < 4 / math.sqrt(4000) * 1.5)
    acc = np.mean([c.accept_stat.mean() for c in chains])
    assert abs(acc - 0.8) < 0.1


def test_correlated_normal_covariance():
    S = np.array([[1.0, 0.9], [0.9, 1.0]])
    P = np.linalg.inv(S)
    f = lambda q: (-0.5 * float(q @ P @ q), -P @ q)  # noqa: E731
    x = pooled(sample_chains(f, 2, SamplerConfig(seed=3)))
    C = np.cov(x.T)
    assert np.allclose(C, S, rtol=0.1, atol=0.05)


def funnel(q):
    v, x = q[0], q[1:]
    lp = -v * v / 18 - 0.5 * float(x @ x) * math.exp(-v) - 0.5 * len(x) * v
    g = np.empty_like(q)
    g[0] = -v / 9 + 0.5 * float(x @ x) * math.exp(-v) - 0.5 * len(x)
    g[1:] = -x * math.exp(-v)
    return lp, g


def test_higher_adapt_delta_takes_smaller_steps():
    lo = sample_chains(funnel, 5, SamplerConfig(chains=2, iter=1000, warmup=500, adapt_delta=0.6, seed=2))
    hi = sample_chains(funnel, 5, SamplerConfig(chains=2, iter=1000, warmup=500, adapt_delta=0.99, seed=2))
    assert max(c.step_size for c in hi) < min(c.step_size for c in lo)
    assert sum(int(c.divergent.sum()) for c in hi) <= sum(int(c.divergent.sum()) for c in lo)
    assert sum(int(c.divergent.sum()) for c in lo) > 0


def test_same_seed_same_draws():
    cfg = SamplerConfig(chains=2, iter=300, warmup=150, seed=9)
    a = pooled(sample_chains(std_normal, 3, cfg))
    b = pooled(sample_chains(std_normal, 3, cfg))
    c = pooled(sample_chains(std_normal, 3, SamplerConfig(chains=2, iter=300, warmup=150, seed=10)))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_thinning_and_kept_count():
    cfg = SamplerConfig(chains=1, iter=300, warmup=100, thin=3, seed=0)
    (c,) = sample_chains(std_normal, 2, cfg)
    assert cfg.kept == 67 and c.draws.shape == (67, 2)


def test_no_finite_start_is_reported():
    with pytest.raises(SamplerError, match="no finite"):
        sample_chains(lambda q: (-math.inf, np.zeros_like(q)), 2, SamplerConfig(chains=1, iter=20, warmup=10))


@pytest.mark.parametrize("kw", [{"adapt_delta": 1.0}, {"warmup": 2000}, {"chains": 0}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        SamplerConfig(**kw)


# --------------------------------------------------------------------------
# diagnostics


def test_rhat_of_iid_draws():
    x = np.random.default_rng(0).normal(size=(4, 1000))
    assert 0.99 <= split_rhat(x) <= 1.02


def test_rhat_of_disagreeing_chains():
    x = np.repeat(np.arange(4.0)[:, None], 100, axis=1) + np.random.default_rng(0).normal(size=(4, 100)) * 1e-3
    assert split_rhat(x) > 10
    const = np.repeat(np.arange(4.0)[:, None], 100, axis=1)
    assert split_rhat(const) > 10


def test_rhat_of_constant_is_undefined():
    with pytest.warns(ConstantParameterWarning):
        assert math.isnan(split_rhat(np.ones((4, 100))))


def test_ess_of_iid_draws():
    x = np.random.default_rng(1).normal(size=(4, 1000))
    assert ess(x) == pytest.approx(4000, rel=0.2)


def test_ess_of_ar1_series():
    rng = np.random.default_rng(2)
    phi = 0.8
    x = np.zeros((4, 5000))
    for c in range(4):
        e = rng.normal(size=5000)
        for t in range(1, 5000):
            x[c, t] = phi * x[c, t - 1] + e[t]
    # asymptotic ESS of an AR(1) chain: N (1 - phi) / (1 + phi)
    assert ess(x) == pytest.approx(20000 * (1 - phi) / (1 + phi), rel=0.2)


def test_summary_of_constant_column():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = summarize_column(np.full((4, 100), 3.0), "b_x")
    assert (r.estimate, r.est_error, r.l95, r.u95) == (3.0, 0.0, 3.0, 3.0)


# --------------------------------------------------------------------------
# point estimates


def test_map_gaussian_intercept_is_the_mean():
    rng = np.random.default_rng(5)
    d = from_columns({"y": rng.normal(3, 2, size=50)})
    m = Model(assemble(validate(bf("y ~ 1", priors=["normal(0, 1000), class = Intercept"]), d), d))
    r = map_estimate(m, np.zeros(m.dim))
    assert r.converged
    ybar = d["y"].as_float().mean()
    assert r.theta[0] == pytest.approx(ybar, abs=1e-3)


def test_map_poisson_intercept_is_log_mean():
    d = from_columns({"c": [0, 1, 3, 2, 5, 1, 0, 4]})
    m = Model(assemble(validate(bf("c ~ 1", family="poisson", priors=["normal(0, 1e6), class = Intercept"]), d), d))
    r = map_estimate(m, np.zeros(m.dim))
    assert r.theta[0] == pytest.approx(math.log(2.0), abs=1e-6)


def test_map_rejects_infinite_start():
    with pytest.raises(ValueError):
        map_estimate(lambda q: (-math.inf, q), np.zeros(2))


# --------------------------------------------------------------------------
# information criteria


def test_gpd_fit_recovers_shape():
    from scipy import stats

    x = stats.genpareto.rvs(0.3, scale=2.0, size=20000, random_state=np.random.default_rng(0))
    k, sigma = gpd_fit(x)
    assert k == pytest.approx(0.3, abs=0.05) and sigma == pytest.approx(2.0, rel=0.1)


def test_psis_weights_are_normalized():
    lw, k = psis_weights(np.random.default_rng(0).normal(size=4000))
    assert math.isclose(np.exp(lw).sum(), 1.0, rel_tol=1e-12)
    assert k < 0.5


def test_loo_matches_exact_for_constant_likelihood():
    ll = np.tile(np.log([0.2, 0.5, 0.9]), (1000, 1))
    r = loo(ll)
    assert r.estimate == pytest.approx(-2 * np.log([0.2, 0.5, 0.9]).sum(), rel=1e-12)
    assert r.p_eff == pytest.approx(0.0, abs=1e-12)
    assert waic(ll).estimate == pytest.approx(r.estimate, rel=1e-12)


def test_psis_loo_matches_exact_leave_one_out():
    # flat-prior normal mean with unit variance: the leave-one-out predictive is
    # normal with the mean of the other points and variance 1 + 1/(n-1)
    from scipy import stats

    rng = np.random.default_rng(6)
    y = rng.normal(1.0, 1.0, size=30)
    n = len(y)
    mu = rng.normal(y.mean(), 1 / math.sqrt(n), size=8000)
    ll = stats.norm.logpdf(y[None, :], mu[:, None], 1.0)
    loo_mean = (y.sum() - y) / (n - 1)
    exact = stats.norm.logpdf(y, loo_mean, math.sqrt(1 + 1 / (n - 1))).sum()
    r = loo(ll)
    assert r.elpd == pytest.approx(exact, abs=0.1)
    assert r.n_bad_k == 0


def test_identical_models_have_zero_difference():
    ll = np.random.default_rng(1).normal(-1, 0.3, size=(2000, 30))
    cmp = ic_compare([ll, ll], ["a", "b"])
    (_, _, d, se) = cmp.diffs[0]
    assert d == 0.0 and se == 0.0


def test_difference_is_antisymmetric():
    rng = np.random.default_rng(2)
    a = rng.normal(-1, 0.3, size=(1000, 25))
    b = rng.normal(-1.2, 0.4, size=(1000, 25))
    ab = ic_compare([a, b]).diffs[0][2]
    ba = ic_compare([b, a]).diffs[0][2]
    assert ab == pytest.approx(-ba, rel=1e-12)
    assert ab == pytest.approx(loo(a).estimate - loo(b).estimate, rel=1e-12)


def test_mismatched_observations_are_rejected():
    with pytest.raises(ValueError):
        ic_compare([np.zeros((10, 3)), np.zeros((10, 4))])


# --------------------------------------------------------------------------
# fitted models


@pytest.fixture(scope="module")
def small_fit(mixed_data):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        checked = validate(bf("y ~ x + h + (1|g)"), mixed_data)
    return fit_model(checked, mixed_data, SamplerConfig(chains=2, iter=600, warmup=300, seed=4), data_name="mixed")


def test_fit_summary_layout(small_fit):
    text = small_fit.summary().render()
    assert text.startswith(" Family: gaussian (identity) \n")
    assert "~g (Number of levels: 4) " in text
    assert "Population-Level Effects: " in text
    second = "h" + small_fit.data["h"].levels[1]
    for label in ("Intercept", "x", second, "sigma", "sd(Intercept)"):
        small_fit.summary().find(label)


def test_draws_round_trip_through_csv(small_fit, tmp_path):
    p = tmp_path / "draws.csv"
    small_fit.draws.to_csv(p)
    back = Draws.from_csv(p)
    assert back.names == small_fit.draws.names
    assert np.array_equal(back.values, small_fit.draws.values)
    raw = raw_from_draws(small_fit.model, back)
    assert np.allclose(raw, small_fit.raw, atol=1e-9)
    assert summarize(back, small_fit.header()).render() == small_fit.summary().render()


def test_expected_and_predictive_agree_on_average(small_fit):
    e = posterior_predict(small_fit, kind="expected")
    p = posterior_predict(small_fit, kind="predictive", seed=1)
    assert e.shape == p.shape == (600, 40)
    sigma = small_fit.draws.flat("sigma").mean()
    assert np.all(np.abs(e.mean(axis=0) - p.mean(axis=0)) < 5 * sigma / math.sqrt(600))
    assert p.std(axis=0).mean() > e.std(axis=0).mean()


def test_population_predictions_ignore_group_labels(small_fit, mixed_data):
    new = from_columns({"x": [0.5, 0.5], "h": ["u", "u"], "g": ["a", "d"]}, factors=["h", "g"])
    new = new.with_column("h", factor(["u", "u"], levels=list(mixed_data["h"].levels)))
    e = posterior_predict(small_fit, new, include_groups=False)
    assert np.array_equal(e[:, 0], e[:, 1])
    e2 = posterior_predict(small_fit, new, include_groups=True)
    assert not np.array_equal(e2[:, 0], e2[:, 1])


def test_unseen_level_gets_drawn_effect(small_fit):
    new = from_columns({"x": [0.0], "h": ["u"], "g": ["new"]}, factors=["h", "g"])
    a = posterior_predict(small_fit, new, include_groups=True, seed=1)
    b = posterior_predict(small_fit, new, include_groups=False)
    assert a.std() > b.std()


def test_effects_grid_blocks_per_condition(small_fit):
    cond = from_columns({"h": ["u", "v"]}, factors=["h"])
    g = effects_grid(small_fit, "x", conditions=cond, resolution=7)
    assert g.columns == ["condition", "h", "x", "estimate", "lower95", "upper95"]
    assert len(g.rows) == 14
    assert g.column("condition") == [1] * 7 + [2] * 7
    lo, est, hi = (np.array(g.column(c)) for c in ("lower95", "estimate", "upper95"))
    assert np.all(lo <= est) and np.all(est <= hi)
    x = np.array(g.column("x"))[:7]
    assert x[0] == pytest.approx(small_fit.data["x"].as_float().min())


def test_effects_grid_of_factor(small_fit):
    g = effects_grid(small_fit, "h")
    assert g.column("h") == list(small_fit.data["h"].levels)


def test_smooth_grid_follows_linear_truth():
    rng = np.random.default_rng(3)
    x = np.sort(rng.uniform(0, 10, 80))
    d = from_columns({"y": 2.0 * x + rng.normal(0, 0.5, size=80), "x": x})
    fit = fit_model(validate(bf("y ~ s(x)"), d), d, SamplerConfig(chains=2, iter=600, warmup=300, seed=2))
    g = effects_grid(fit, "x", resolution=11, smooth_only=True)
    assert g.columns == ["smooth", "x", "estimate", "lower95", "upper95"]
    gx = np.array(g.column("x"))
    est = np.array(g.column("estimate"))
    truth = 2.0 * (gx - gx.mean())
    assert np.max(np.abs(est - truth)) < 0.6
