"""Information criteria from pointwise log-likelihoods: WAIC and Pareto-smoothed LOO."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

TAIL_FRACTION = 0.2
K_THRESHOLD = 0.7


def gpd_fit(x: np.ndarray) -> tuple[float, float]:
    """Generalized Pareto (k, sigma) for exceedances ``x``.

    Profile-likelihood grid estimate with a weakly informative prior and the
    usual shrinkage of k towards 0.5 for small samples.
    """
    x = np.sort(np.asarray(x, dtype=float))
    n = len(x)
    prior = 3.0
    m = 30 + int(math.floor(math.sqrt(n)))
    jj = np.arange(1, m + 1)
    xstar = x[int(math.floor(n / 4 + 0.5)) - 1]
    theta = 1.0 / x[-1] + (1.0 - np.sqrt(m / (jj - 0.5))) / prior / xstar
    a = -theta
    k = np.mean(np.log1p(a[:, None] * x[None, :]), axis=1)
    l_theta = n * (np.log(a / k) - k - 1.0)
    w = np.exp(l_theta - logsumexp(l_theta))
    theta_hat = float(np.sum(theta * w))
    k_hat = float(np.mean(np.log1p(-theta_hat * x)))
    sigma = -k_hat / theta_hat
    k_hat = (n * k_hat + 10 * 0.5) / (n + 10)
    return k_hat, sigma


def _gpd_quantile(p, k, sigma):
    if k == 0:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def psis_weights(log_ratios: np.ndarray, tail_fraction: float = TAIL_FRACTION):
    """Smoothed, normalized log weights for one observation and the Pareto k diagnostic."""
    S = len(log_ratios)
    lw = log_ratios - np.max(log_ratios)
    k = math.inf
    tail = int(math.ceil(tail_fraction * S))
    if tail >= 5 and tail < S:
        order = np.argsort(lw, kind="stable")
        tail_ids = order[S - tail :]
        lw_tail = lw[tail_ids]
        cutoff = lw[order[S - tail - 1]]
        if np.ptp(lw_tail) > np.finfo(float).eps / 100:
            ec = math.exp(cutoff)
            k, sigma = gpd_fit(np.exp(lw_tail) - ec)
            if math.isfinite(k):
                p = (np.arange(1, tail + 1) - 0.5) / tail
                lw[tail_ids] = np.log(_gpd_quantile(p, k, sigma) + ec)
    lw = np.minimum(lw, 0.0)
    lw = lw - logsumexp(lw)
    return lw, k


@dataclass
class ICResult:
    method: str
    estimate: float  # on the deviance scale (-2 x elpd)
    se: float
    pointwise: np.ndarray  # per-observation contributions on the deviance scale
    pareto_k: np.ndarray | None = None
    p_eff: float = math.nan

    @property
    def elpd(self) -> float:
        return -self.estimate / 2

    @property
    def n_bad_k(self) -> int:
        return int(np.sum(self.pareto_k > K_THRESHOLD)) if self.pareto_k is not None else 0


def _se(pointwise):
    n = len(pointwise)
    return math.sqrt(n * np.var(pointwise, ddof=1)) if n > 1 else 0.0


def loo(ll: np.ndarray) -> ICResult:
    """PSIS-LOO from a draws x observations log-likelihood matrix."""
    ll = np.asarray(ll, dtype=float)
    S, n = ll.shape
    elpd = np.empty(n)
    ks = np.empty(n)
    for i in range(n):
        lw, k = psis_weights(-ll[:, i])
        elpd[i] = logsumexp(lw + ll[:, i])
        ks[i] = k
    lpd = logsumexp(ll, axis=0) - math.log(S)
    point = -2 * elpd
    return ICResult("loo", float(point.sum()), _se(point), point, ks, float(np.sum(lpd - elpd)))


def waic(ll: np.ndarray) -> ICResult:
    ll = np.asarray(ll, dtype=float)
    S = ll.shape[0]
    lpd = logsumexp(ll, axis=0) - math.log(S)
    p = np.var(ll, axis=0, ddof=1)
    point = -2 * (lpd - p)
    return ICResult("waic", float(point.sum()), _se(point), point, None, float(p.sum()))


@dataclass
class Comparison:
    names: list[str]
    results: list[ICResult]
    diffs: list  # (name_a, name_b, diff, se)

    def render(self) -> str:
        label = "LOOIC" if self.results[0].method == "loo" else "WAIC"
        rows = [(n, r.estimate, r.se) for n, r in zip(self.names, self.results)]
        rows += [(f"{a} - {b}", d, s) for a, b, d, s in self.diffs]
        lw = max(len(r[0]) for r in rows)
        vals = [(f"{v:.2f}", f"{s:.2f}") for _, v, s in rows]
        w1 = max(len(label), *(len(v[0]) for v in vals))
        w2 = max(2, *(len(v[1]) for v in vals))
        out = [" " * lw + " " + label.rjust(w1) + " " + "SE".rjust(w2)]
        for (n, _, _), (v, s) in zip(rows, vals):
            out.append(n.ljust(lw) + " " + v.rjust(w1) + " " + s.rjust(w2))
        for n, r in zip(self.names, self.results):
            if r.n_bad_k:
                out.append(f"warning: {n} has {r.n_bad_k} observations with Pareto k > {K_THRESHOLD}")
        return "\n".join(out) + "\n"


def ic_compare(lls: list[np.ndarray], names: list[str] | None = None, method: str = "loo") -> Comparison:
    """Per-model criteria and all pairwise differences (earlier minus later model)."""
    if not lls:
        raise ValueError("need at least one model")
    n = lls[0].shape[1]
    if any(ll.shape[1] != n for ll in lls):
        raise ValueError("models were fit to different numbers of observations")
    names = names or [f"model{i + 1}" for i in range(len(lls))]
    fn = {"loo": loo, "waic": waic}[method]
    res = [fn(ll) for ll in lls]
    diffs = []
    for i in range(len(res)):
        for j in range(i + 1, len(res)):
            d = res[i].pointwise - res[j].pointwise
            diffs.append((names[i], names[j], float(d.sum()), _se(d)))
    return Comparison(list(names), res, diffs)
