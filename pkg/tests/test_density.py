import math
import warnings
import zlib
from decimal import Decimal, getcontext

import numpy as np
import pytest
from scipy import integrate, stats

from hierform.density import (
    Model,
    cholesky_from_unconstrained,
    eval_nl,
    lkj_cholesky_logpdf,
    poisson_log_pmf,
    prior_logpdf,
    unconstrain_cholesky,
    zip_log_pmf,
)
from hierform.design import assemble
from hierform.families import link_forward, link_inverse
from hierform.formula import parse_nl_expression
from hierform.modelspec import PriorDist, bf, validate


def model(formula, d, *extra, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return Model(assemble(validate(bf(formula, *extra, **kw), d), d))


# --------------------------------------------------------------------------
# gradients against central differences

GRAD_CASES = [
    ("y ~ x + h", (), "gaussian", False, ()),
    ("y | weights(w) ~ x*h + (1+x|g)", (), "gaussian", False, ()),
    ("y ~ x + (1|ID|g)", ("sigma ~ x + (1|ID|g)",), "gaussian", False, ()),
    ("yp ~ x + (x||g)", (), "gaussian(log)", False, ()),
    ("c ~ x + (1|g) + (1|g:h)", (), "poisson", False, ()),
    ("c ~ x2", (), "poisson(identity)", False, ()),
    ("c ~ x + h", ("zi ~ x",), "zero_inflated_poisson", False, ()),
    ("c ~ x + (1|g)", (), "zero_inflated_poisson", False, ("beta(2, 3), class = zi",)),
    ("c ~ x + (1|ID|g)", ("zi ~ 1 + (1|ID|g)",), "zero_inflated_poisson", False, ()),
    ("y ~ s(x2) + x", ("sigma ~ s(x)",), "gaussian", False, ()),
    ("y ~ 1 + (1+x|mm(s1,s2,weights=cbind(w1,w2)))", (), "gaussian", False, ()),
    ("yp ~ a * (1 - exp(-(x2 / b)^k))", ("a ~ 1 + (1|g)", "b ~ 1", "k ~ 1"), "gaussian", True,
     ("normal(2, 1), nlpar = b", "normal(1,1), nlpar=k")),
    ("yp ~ a * (1 - exp(-(x2 / b)^k))", ("a + b + k ~ 1 + (1|ID1|g)",), "gaussian", True,
     ("normal(2, 1), nlpar = b", "normal(1,1), nlpar=k")),
    ("c ~ exp(a + b*x)", ("a ~ 1 + (1|g)", "b ~ h"), "poisson(identity)", True, ()),
    ("y ~ x + (1+x+h|g)", (), "gaussian", False,
     ("lkj(2), class = cor", "normal(0,2), class = sd", "student_t(3, 0, 2.5), class=sigma", "normal(0, 5), class = Intercept")),
]


@pytest.mark.parametrize("case", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_gradient_matches_finite_differences(mixed_data, case):
    f, ex, fam, nl, pr = case
    m = model(f, mixed_data, *ex, family=fam, nl=nl, priors=pr)
    rng = np.random.default_rng(zlib.crc32(f.encode()))
    worst = 0.0
    for _ in range(20):
        if nl:
            th = rng.uniform(-0.3, 0.3, m.dim)
            for k in ("b:a", "b:b", "b:k"):
                if k in m.space:
                    th[m.space[k].offset] = rng.uniform(1, 2)
        else:
            th = rng.uniform(-0.7, 0.7, m.dim)
            if "identity" in fam:
                th[0] = 3.0
        lp, g = m(th)
        assert np.isfinite(lp)
        h = 1e-6
        fd = np.array([(m(th + h * e)[0] - m(th - h * e)[0]) / (2 * h) for e in np.eye(m.dim)])
        rel = np.abs(fd - g) / np.maximum(np.maximum(np.abs(fd), np.abs(g)), 1.0)
        worst = max(worst, rel.max())
    assert worst < 1e-6


# --------------------------------------------------------------------------
# a complete log posterior written out with scipy


def test_log_density_matches_independent_formula(mixed_data):
    m = model("y ~ x + (1|g)", mixed_data)
    rng = np.random.default_rng(8)
    th = rng.normal(size=m.dim) * 0.5
    sp = m.space
    b0, bx = th[sp["b:mu"].sl]
    log_sd = th[sp["logsd:0"].sl][0]
    z = th[sp["z:0"].sl]
    log_sigma = th[sp["sigma"].sl][0]
    sd, sigma = math.exp(log_sd), math.exp(log_sigma)
    t = stats.t(3, 0, 10)
    half = lambda v: t.logpdf(v) - math.log(0.5)  # noqa: E731
    levels = sorted(set(mixed_data["g"].labels))
    u = dict(zip(levels, sd * z))
    mu = b0 + bx * mixed_data["x"].as_float() + np.array([u[lab] for lab in mixed_data["g"].labels])
    expected = (
        t.logpdf(b0)
        + half(sd) + log_sd
        + stats.norm.logpdf(z).sum()
        + half(sigma) + log_sigma
        + stats.norm.logpdf(mixed_data["y"].as_float(), mu, sigma).sum()
    )
    assert m.log_density(th) == pytest.approx(expected, rel=1e-12, abs=1e-10)


def test_zip_model_log_density_matches_mixture(mixed_data):
    m = model("c ~ x", mixed_data, family="zero_inflated_poisson")
    th = np.array([0.4, -0.2, -1.1])
    zi = 1 / (1 + math.exp(1.1))
    lam = np.exp(0.4 - 0.2 * mixed_data["x"].as_float())
    y = mixed_data["c"].as_float()
    pmf = np.where(y == 0, zi + (1 - zi) * np.exp(-lam), (1 - zi) * stats.poisson.pmf(y, lam))
    # uniform prior on zi plus the log-Jacobian of the logit map
    expected = stats.t(3, 0, 10).logpdf(0.4) + math.log(zi * (1 - zi)) + np.log(pmf).sum()
    assert m.log_density(th) == pytest.approx(expected, rel=1e-12)


def test_row_permutation_leaves_density_unchanged(mixed_data):
    perm = np.random.default_rng(1).permutation(mixed_data.n_rows)
    shuffled = mixed_data.select_rows(perm)
    a = model("y ~ x + (1 + x|g) + (1|mm(s1, s2))", mixed_data)
    b = model("y ~ x + (1 + x|g) + (1|mm(s1, s2))", shuffled)
    th = np.random.default_rng(2).normal(size=a.dim) * 0.3
    assert b.log_density(th) == pytest.approx(a.log_density(th), rel=1e-12)


def test_invalid_region_gives_minus_infinity(mixed_data):
    m = model("c ~ x2", mixed_data, family="poisson(identity)")
    lp, g = m(np.array([-5.0, 0.0]))
    assert lp == -math.inf and not g.any()


# --------------------------------------------------------------------------
# zero-inflated Poisson


@pytest.mark.parametrize("lam, zi", [(0.3, 0.1), (4.0, 0.5), (12.0, 0.9)])
def test_zip_normalizes(lam, zi):
    y = np.arange(0, 200)
    assert np.exp(zip_log_pmf(y, lam, zi)).sum() == pytest.approx(1.0, abs=1e-12)


def test_zip_without_inflation_is_poisson():
    y = np.arange(0, 30)
    assert np.allclose(zip_log_pmf(y, 2.5, 0.0), stats.poisson.logpmf(y, 2.5), atol=1e-13)
    assert np.allclose(poisson_log_pmf(y, 2.5), stats.poisson.logpmf(y, 2.5), atol=1e-13)


def test_zip_zero_count():
    assert zip_log_pmf(0, 2.0, 0.3) == pytest.approx(math.log(0.3 + 0.7 * math.exp(-2.0)), rel=1e-14)


def test_zip_rejects_bad_arguments():
    with pytest.raises(ValueError):
        zip_log_pmf(1, -1.0, 0.2)
    with pytest.raises(ValueError):
        zip_log_pmf(1, 1.0, 1.2)


# --------------------------------------------------------------------------
# priors and transforms


def test_normal_prior_peak():
    lp, d = prior_logpdf(PriorDist("normal", (0.0, 1.0)), 0.0)
    assert math.exp(lp) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-14) and d == 0


def test_half_student_t_is_truncated():
    dist = PriorDist("half_student_t", (3.0, 0.0, 10.0))
    val, _ = integrate.quad(lambda s: math.exp(prior_logpdf(dist, s)[0]), 0, np.inf)
    assert val == pytest.approx(1.0, abs=1e-8)


def test_lkj_uniform_in_two_dimensions():
    for r in (-0.8, 0.0, 0.4):
        L = np.linalg.cholesky(np.array([[1.0, r], [r, 1.0]]))
        assert math.exp(lkj_cholesky_logpdf(L, 1.0)) == pytest.approx(0.5, rel=1e-12)


def test_cholesky_round_trip():
    rng = np.random.default_rng(3)
    for K in (2, 3, 4):
        v = rng.normal(size=K * (K - 1) // 2)
        L = cholesky_from_unconstrained(v, K)
        assert np.allclose(np.diag(L @ L.T), 1.0)
        assert np.allclose(unconstrain_cholesky(L), v)


def _segment_density(m, key, x):
    th = np.zeros(m.dim)
    th[m.space[key].sl] = x
    return m._log_prior(th, np.zeros(m.dim))


@pytest.mark.parametrize("eta", [1.0, 2.5])
def test_correlation_prior_integrates_to_one_k2(mixed_data, eta):
    m = model("y ~ (1 + x|g)", mixed_data, priors=[f"lkj({eta}), class = cor"])
    base = _segment_density(m, "cor:0", [0.0])
    # the prior on the unconstrained coordinate, including the transform Jacobian
    val, _ = integrate.quad(lambda v: math.exp(_segment_density(m, "cor:0", [v]) - base), -np.inf, np.inf)
    from hierform.density import log_lkj_const

    assert val * math.exp(-log_lkj_const(2, eta)) == pytest.approx(1.0, abs=1e-8)


def test_correlation_prior_integrates_to_one_k3(mixed_data):
    m = model("y ~ (1 + x + x2|g)", mixed_data)
    from hierform.density import log_lkj_const

    base = _segment_density(m, "cor:0", [0.0, 0.0, 0.0]) + log_lkj_const(3, 1.0)

    def f(a, b, c):
        v = np.tan([a, b, c])
        jac = np.prod(1 / np.cos([a, b, c]) ** 2)
        return math.exp(_segment_density(m, "cor:0", v) - base) * jac

    h = math.pi / 2
    val, _ = integrate.nquad(f, [(-h, h)] * 3, opts={"epsabs": 1e-6, "limit": 30})
    assert val == pytest.approx(1.0, abs=1e-4)


def test_scale_prior_with_jacobian_integrates_to_one(mixed_data):
    m = model("y ~ 1", mixed_data)
    base = _segment_density(m, "sigma", [0.0]) - prior_logpdf(PriorDist("half_student_t", (3.0, 0.0, 10.0)), 1.0)[0]
    val, _ = integrate.quad(lambda x: math.exp(_segment_density(m, "sigma", [x]) - base), -30, 30, limit=200)
    assert val == pytest.approx(1.0, abs=1e-7)


def test_zi_beta_prior_integrates_to_one(mixed_data):
    m = model("c ~ 1", mixed_data, family="zero_inflated_poisson", priors=["beta(2, 3), class = zi"])
    at0 = _segment_density(m, "zi", [0.0])
    base = at0 - (prior_logpdf(PriorDist("beta", (2.0, 3.0)), 0.5)[0] + math.log(0.25))
    with np.errstate(all="ignore"):
        val, _ = integrate.quad(lambda x: math.exp(_segment_density(m, "zi", [x]) - base), -40, 40, limit=200)
    assert val == pytest.approx(1.0, abs=1e-7)


def test_prior_sampling_matches_density_of_scale(mixed_data):
    # draws of log(sigma) with sigma from the truncated prior should have the model's density
    m = model("y ~ 1", mixed_data)
    rng = np.random.default_rng(0)
    s = np.abs(stats.t.rvs(3, 0, 10, size=200_000, random_state=rng))
    hist, edges = np.histogram(np.log(s), bins=40, range=(-2, 5), density=False)
    base = _segment_density(m, "sigma", [0.0]) - prior_logpdf(PriorDist("half_student_t", (3.0, 0.0, 10.0)), 1.0)[0]
    mids = (edges[:-1] + edges[1:]) / 2
    dens = np.array([math.exp(_segment_density(m, "sigma", [x]) - base) for x in mids])
    expected = dens * np.diff(edges) * len(s)
    assert np.max(np.abs(hist - expected) / np.sqrt(expected + 1)) < 5


# --------------------------------------------------------------------------
# predictors and links


def test_loss_curve_against_decimal_oracle():
    getcontext().prec = 40
    e = parse_nl_expression("ult * (1 - exp(-(dev / theta)^omega))")
    dev = np.array([6.0, 18, 30, 66, 114])
    env = {"ult": np.full(5, 5276.5), "theta": np.full(5, 45.91), "omega": np.full(5, 1.34), "dev": dev}
    got = eval_nl(e, env, 5)
    for d, g in zip(dev, got):
        r = (Decimal(repr(float(d))) / Decimal("45.91")) ** Decimal("1.34")
        want = Decimal("5276.5") * (1 - (-r).exp())
        assert g == pytest.approx(float(want), rel=1e-13)


def test_inverse_links():
    assert link_inverse("logit", -0.95) == pytest.approx(0.2789, abs=5e-5)
    assert link_inverse("log", 0.0) == 1.0
    x = np.linspace(-4, 4, 9)
    for link in ("identity", "log", "logit"):
        assert np.allclose(link_forward(link, link_inverse(link, x)), x)


def test_nonlinear_domain_error_reports_row():
    from hierform.density import NlDomainError

    e = parse_nl_expression("log(x)")
    with pytest.raises(NlDomainError) as info:
        eval_nl(e, {"x": np.array([1.0, 2.0, -1.0])}, 3)
    assert info.value.row == 2


def test_pointwise_loglik_sums_to_likelihood(mixed_data):
    m = model("y | weights(w) ~ x", mixed_data)
    th = np.array([0.1, 0.2, -0.3])
    ll = m.pointwise_loglik(th)
    sigma = math.exp(-0.3)
    mu = 0.1 + 0.2 * mixed_data["x"].as_float()
    expected = mixed_data["w"].as_float() * stats.norm.logpdf(mixed_data["y"].as_float(), mu, sigma)
    assert np.allclose(ll, expected, rtol=1e-12)
