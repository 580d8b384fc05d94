"""Fitting entry points, posterior predictions and effects grids."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from ..design import DesignSet, assemble
from ..density import Model
from ..modelspec import CheckedSpec
from ..tabular import FACTOR, INTEGER, Column, Dataset, _fmt
from .draws import Draws, SummaryTable, summarize
from .nuts import SamplerConfig, sample_chains


@dataclass
class MapResult:
    theta: np.ndarray
    lp: float
    converged: bool
    grad_norm: float
    iterations: int
    message: str = ""


def map_estimate(logp_grad, init, tol: float = 1e-8, maxiter: int = 10000) -> MapResult:
    """Quasi-Newton ascent of ``logp_grad`` from ``init``."""
    init = np.asarray(init, dtype=float)
    lp0, _ = logp_grad(init)
    if not math.isfinite(lp0):
        raise ValueError("log density is not finite at the starting point")
    best = {"lp": lp0, "x": init.copy()}

    def fun(x):
        lp, g = logp_grad(x)
        if not math.isfinite(lp):
            return 1e300, np.zeros_like(x)
        if lp > best["lp"]:
            best["lp"], best["x"] = lp, x.copy()
        return -lp, -g

    res = optimize.minimize(
        fun, init, jac=True, method="L-BFGS-B",
        options={"gtol": tol, "ftol": 1e-15, "maxiter": maxiter, "maxcor": 20},
    )
    x = best["x"]
    lp, g = logp_grad(x)
    gn = float(np.max(np.abs(g))) if g.size else 0.0
    return MapResult(x, lp, gn < tol, gn, int(res.nit), str(res.message))


@dataclass
class Fit:
    checked: CheckedSpec
    data: Dataset
    design: DesignSet
    model: Model
    config: SamplerConfig
    draws: Draws
    raw: np.ndarray  # chains x draws x dim, unconstrained
    data_name: str = "data"
    meta: dict = field(default_factory=dict)

    def header(self) -> list[str]:
        return summary_header(self.checked.spec, self.config, self.design.n, self.data_name, self.draws.divergences)

    def summary(self) -> SummaryTable:
        return summarize(self.draws, self.header())

    def thetas(self) -> np.ndarray:
        return self.raw.reshape(-1, self.raw.shape[-1])

    def loglik(self) -> np.ndarray:
        return pointwise_loglik(self.model, self.thetas())


def summary_header(spec, config: SamplerConfig, n: int, data_name: str, divergences: int = 0) -> list[str]:
    lines = [f" Family: {spec.family.label} "]
    if len(spec.family.dpars) > 1:
        links = "; ".join(f"{d} = {spec.family.link(d)}" for d in spec.family.dpars)
        lines.append(f"  Links: {links} ")
    flines = spec.formula_lines()
    lines.append(f"Formula: {flines[0]} ")
    lines += [f"         {l}" for l in flines[1:]]
    lines.append(f"   Data: {data_name} (Number of observations: {n}) ")
    lines.append(
        f"Samples: {config.chains} chains, each with iter = {config.iter}; "
        f"warmup = {config.warmup}; thin = {config.thin}; "
    )
    lines.append(f"         total post-warmup samples = {config.chains * config.kept}")
    lines.append(f"Sampler: adapt_delta = {config.adapt_delta}; divergent transitions = {divergences}")
    lines.append(" ")
    return lines


def fit_model(checked: CheckedSpec, data: Dataset, config: SamplerConfig, data_name: str = "data", inits=None) -> Fit:
    design = assemble(checked, data)
    model = Model(design)
    t0 = time.time()
    chains = sample_chains(model, model.dim, config, inits)
    wall = time.time() - t0
    return fit_from_chains(checked, data, design, model, config, chains, data_name, wall)


def fit_from_chains(checked, data, design, model, config, chains, data_name, wall) -> Fit:
    raw = np.stack([c.draws for c in chains])
    names = model.space.constrained_names()
    vals = np.empty(raw.shape[:2] + (len(names),))
    for c in range(raw.shape[0]):
        for i in range(raw.shape[1]):
            vals[c, i] = model.space.constrained(raw[c, i])[1]
    stats = {
        "lp__": np.stack([c.lp for c in chains]),
        "accept_stat__": np.stack([c.accept_stat for c in chains]),
        "treedepth__": np.stack([c.treedepth for c in chains]).astype(float),
        "n_leapfrog__": np.stack([c.n_leapfrog for c in chains]).astype(float),
        "divergent__": np.stack([c.divergent for c in chains]).astype(float),
    }
    draws = Draws(names, vals, stats, [c.step_size for c in chains])
    meta = {
        "seed": config.seed,
        "wall_time_s": wall,
        "divergences": draws.divergences,
        "warmup_divergences": int(sum(c.warmup_divergences for c in chains)),
        "max_treedepth_hits": int(sum(int(np.sum(c.treedepth >= config.max_treedepth)) for c in chains)),
        "step_sizes": [c.step_size for c in chains],
        "data_name": data_name,
        "n": design.n,
    }
    return Fit(checked, data, design, model, config, draws, raw, data_name, meta)


def raw_from_draws(model: Model, draws: Draws) -> np.ndarray:
    """Recover unconstrained vectors from constrained draws."""
    out = np.empty((draws.n_chains, draws.n_draws, model.dim))
    for c in range(draws.n_chains):
        for i in range(draws.n_draws):
            out[c, i] = model.space.unconstrain(dict(zip(draws.names, draws.values[c, i])))
    return out


# --------------------------------------------------------------------------
# predictions


def pointwise_loglik(model: Model, thetas: np.ndarray, design: DesignSet | None = None) -> np.ndarray:
    """Draws x observations log-likelihood matrix (observation weights applied)."""
    thetas = np.atleast_2d(thetas)
    return np.stack([model.pointwise_loglik(t, design) for t in thetas])


def _expected(family, dp) -> np.ndarray:
    if family.name == "zero_inflated_poisson":
        return (1.0 - dp["zi"]) * dp["mu"]
    return dp["mu"]


def _predictive(family, dp, rng) -> np.ndarray:
    mu = dp["mu"]
    if family.name == "gaussian":
        return rng.normal(mu, dp["sigma"])
    if family.name == "poisson":
        return rng.poisson(mu).astype(float)
    y = rng.poisson(mu).astype(float)
    return np.where(rng.uniform(size=mu.shape) < dp["zi"], 0.0, y)


def posterior_predict(
    fit: Fit,
    newdata: Dataset | None = None,
    include_groups: bool = True,
    kind: str = "expected",
    seed: int | None = None,
    thetas: np.ndarray | None = None,
) -> np.ndarray:
    """Draws x rows matrix of expected values or posterior predictive samples.

    Levels unseen in training get a fresh effect from the fitted group
    distribution per draw when ``include_groups`` is set.
    """
    if kind not in ("expected", "predictive"):
        raise ValueError("kind must be 'expected' or 'predictive'")
    ds = fit.design if newdata is None else assemble(fit.checked, newdata, reference=fit.design, require_response=False)
    rng = np.random.default_rng(fit.config.seed if seed is None else seed)
    thetas = fit.thetas() if thetas is None else thetas
    fam = fit.design.family
    out = np.empty((len(thetas), ds.n))
    for s, th in enumerate(thetas):
        dp = fit.model.dpar_values(th, ds, include_groups, rng)
        out[s] = _expected(fam, dp) if kind == "expected" else _predictive(fam, dp, rng)
    return out


def _typical_columns(data: Dataset, n: int) -> dict:
    """Every column at its mean (numeric) or reference level (factor), repeated n times."""
    cols = {}
    for name, col in data.columns.items():
        if col.kind == FACTOR:
            cols[name] = Column(FACTOR, np.zeros(n, dtype=np.int64), col.levels)
        elif col.kind == INTEGER:
            cols[name] = Column(INTEGER, np.full(n, int(round(col.values.mean())) if len(col) else 0))
        else:
            cols[name] = Column(col.kind, np.full(n, col.as_float().mean() if len(col) else 0.0))
    return cols


def _set_column(cols: dict, data: Dataset, name: str, values) -> None:
    ref = data[name]
    n = len(values)
    if ref.kind == FACTOR:
        labels = [v if isinstance(v, str) else _fmt(v) for v in values]
        levels = list(ref.levels)
        for lab in labels:
            if lab not in levels:
                levels.append(lab)
        cols[name] = Column(FACTOR, np.array([levels.index(l) for l in labels], dtype=np.int64), tuple(levels))
    elif ref.kind == INTEGER:
        cols[name] = Column(INTEGER, np.asarray(values, dtype=float).round().astype(np.int64))
    else:
        cols[name] = Column(ref.kind, np.asarray(values, dtype=float))
    assert len(cols[name]) == n


@dataclass
class EffectsGrid:
    focal: str
    columns: list[str]
    rows: list[list]

    def to_csv(self) -> str:
        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        return buf.getvalue()

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def effects_grid(
    fit: Fit,
    focal: str,
    conditions: Dataset | None = None,
    resolution: int = 100,
    smooth_only: bool = False,
    kind: str = "expected",
    include_groups: bool = False,
    seed: int | None = None,
) -> EffectsGrid:
    """Posterior summary of the response (or a smooth) over a grid of ``focal``.

    Other numeric predictors sit at their means and factors at their
    reference level; each row of ``conditions`` overrides those values and
    yields its own block of grid rows.
    """
    data = fit.data
    if focal not in data:
        raise KeyError(f"unknown focal variable {focal!r}")
    fcol = data[focal]
    if fcol.kind == FACTOR:
        grid = list(fcol.levels)
    else:
        x = fcol.as_float()
        if np.ptp(x) == 0:
            raise ValueError(f"focal variable {focal!r} is constant")
        grid = list(np.linspace(x.min(), x.max(), resolution))
    if smooth_only:
        return _smooth_grid(fit, focal, np.asarray(grid, dtype=float))
    cond_rows = [{}] if conditions is None else [
        {name: conditions[name].labels[i] if conditions[name].kind == FACTOR else conditions[name].values[i]
         for name in conditions.names}
        for i in range(conditions.n_rows)
    ]
    cond_names = [] if conditions is None else list(conditions.names)
    rows = []
    for ci, cond in enumerate(cond_rows):
        n = len(grid)
        cols = _typical_columns(data, n)
        for name, val in cond.items():
            if name in data:
                _set_column(cols, data, name, [val] * n)
        _set_column(cols, data, focal, grid)
        nd = Dataset(cols, n)
        pred = posterior_predict(fit, nd, include_groups=include_groups, kind=kind, seed=seed)
        est = pred.mean(axis=0)
        lo, hi = np.quantile(pred, [0.025, 0.975], axis=0)
        for j in range(n):
            g = grid[j] if isinstance(grid[j], str) else float(grid[j])
            rows.append([ci + 1, *[cond.get(c) for c in cond_names], g, float(est[j]), float(lo[j]), float(hi[j])])
    return EffectsGrid(focal, ["condition", *cond_names, focal, "estimate", "lower95", "upper95"], rows)


def _smooth_grid(fit: Fit, focal: str, grid: np.ndarray) -> EffectsGrid:
    blocks = [(o, s) for o, ss in fit.design.smooths.items() for s in ss if s.covariate == focal]
    if not blocks:
        raise ValueError(f"model has no smooth of {focal!r}")
    sp = fit.model.space
    rows = []
    for ci, (owner, sm) in enumerate(blocks):
        Xs, Zs = sm.transform(grid)
        th = fit.thetas()
        bs = th[:, sp[f"bs:{sm.name}"].sl]
        sds = np.exp(th[:, sp[f"logsds:{sm.name}"].sl])
        zs = th[:, sp[f"zs:{sm.name}"].sl]
        f = bs @ Xs.T + (sds * zs) @ Zs.T
        f = f - f.mean(axis=1, keepdims=True)
        est = f.mean(axis=0)
        lo, hi = np.quantile(f, [0.025, 0.975], axis=0)
        for j in range(len(grid)):
            rows.append([sm.name, float(grid[j]), float(est[j]), float(lo[j]), float(hi[j])])
    return EffectsGrid(focal, ["smooth", focal, "estimate", "lower95", "upper95"], rows)
