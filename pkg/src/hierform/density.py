"""Log-posterior and gradient over a flat unconstrained parameter vector.

Layout (in order): per linear owner its coefficients and smooth parameters,
then per group-level block ``log sd``, correlation parameters and standardized
effects ``z``, then any unmodeled family parameters (``log sigma``,
``logit zi``). Group effects are non-centered, ``u_g = diag(sd) L z_g``.

Gradients are hand-coded adjoints; the non-linear predictor is differentiated
by a small reverse pass over its expression tree.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import betaln, expit, gammaln, log_expit, logsumexp

from . import formula as F
from .design import DesignSet, block_effects
from .families import link_inverse
from .modelspec import (
    DEFAULT_COR,
    DEFAULT_INTERCEPT,
    DEFAULT_SCALE,
    MU,
    PriorDist,
    find_prior,
    prefix,
)

LOG_2PI = math.log(2 * math.pi)


# --------------------------------------------------------------------------
# scalar densities


@functools.lru_cache(maxsize=256)
def _log_mass_above_zero(family: str, params: tuple) -> float:
    """log P(X > 0), the normalizer of a prior truncated to the positive axis."""
    if family == "normal":
        return float(stats.norm.logsf(0.0, params[0], params[1]))
    nu, mu, s = params
    return float(stats.t.logsf(0.0, nu, mu, s))


def prior_logpdf(dist: PriorDist | None, x, positive: bool = False):
    """Log density and derivative of ``dist`` at ``x`` (elementwise).

    ``positive`` truncates the distribution to x > 0 (scale parameters).
    ``None`` is the improper flat prior.
    """
    x = np.asarray(x, dtype=float)
    if dist is None:
        return np.zeros_like(x), np.zeros_like(x)
    fam, p = dist.family, dist.params
    if fam == "normal":
        mu, s = p
        r = (x - mu) / s
        lp = -0.5 * LOG_2PI - math.log(s) - 0.5 * r * r
        d = -r / s
    elif fam in ("student_t", "half_student_t"):
        nu, mu, s = p
        r = (x - mu) / s
        lp = (
            gammaln((nu + 1) / 2) - gammaln(nu / 2) - 0.5 * math.log(nu * math.pi) - math.log(s)
            - (nu + 1) / 2 * np.log1p(r * r / nu)
        )
        d = -(nu + 1) * (x - mu) / (nu * s * s + (x - mu) ** 2)
        positive = positive or fam == "half_student_t"
    elif fam == "beta":
        a, b = p
        lp = (a - 1) * np.log(x) + (b - 1) * np.log1p(-x) - betaln(a, b)
        d = (a - 1) / x - (b - 1) / (1 - x)
        positive = False
    else:
        raise ValueError(f"{fam} is not a scalar prior")
    if positive:
        lp = lp - _log_mass_above_zero(fam, tuple(p))
    return lp, d


def log_lkj_const(K: int, eta: float) -> float:
    """log c_K such that the LKJ density on Cholesky factors integrates to one."""
    s2 = 0.0
    sb = 0.0
    for k in range(1, K):
        s2 += (2 * eta - 2 + K - k) * (K - k)
        a = eta + (K - k - 1) / 2
        sb += (K - k) * betaln(a, a)
    return s2 * math.log(2) + sb


def lkj_cholesky_logpdf(L: np.ndarray, eta: float) -> float:
    """LKJ(eta) log density of a correlation Cholesky factor (w.r.t. its free coordinates)."""
    K = L.shape[0]
    i = np.arange(1, K)
    return float(np.sum((K - i - 1 + 2 * eta - 2) * np.log(np.diag(L)[1:])) - log_lkj_const(K, eta))


def cholesky_from_unconstrained(v: np.ndarray, K: int) -> np.ndarray:
    """Row r of L is (v_r, 1) / sqrt(1 + |v_r|^2) padded with zeros."""
    L = np.zeros((K, K))
    L[0, 0] = 1.0
    o = 0
    for r in range(1, K):
        vr = v[o : o + r]
        n = math.sqrt(1.0 + float(vr @ vr))
        L[r, :r] = vr / n
        L[r, r] = 1.0 / n
        o += r
    return L


def unconstrain_cholesky(L: np.ndarray) -> np.ndarray:
    K = L.shape[0]
    return np.concatenate([L[r, :r] / L[r, r] for r in range(1, K)]) if K > 1 else np.zeros(0)


def zip_log_pmf(y, lam, zi):
    """Zero-inflated Poisson log pmf: zi * 1[y=0] + (1-zi) * Poisson(y | lam)."""
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    zi = np.asarray(zi, dtype=float)
    if np.any(lam < 0) or np.any((zi < 0) | (zi > 1)):
        raise ValueError("zip_log_pmf needs lam >= 0 and zi in [0, 1]")
    if np.any(y < 0):
        raise ValueError("zip_log_pmf needs y >= 0")
    with np.errstate(divide="ignore"):
        log_zi = np.log(zi)
        log_1mzi = np.log1p(-zi)
        pois = np.where(lam > 0, y * np.log(np.where(lam > 0, lam, 1.0)), np.where(y == 0, 0.0, -np.inf)) - lam - gammaln(y + 1)
    zero = logsumexp(np.stack(np.broadcast_arrays(log_zi, log_1mzi - lam)), axis=0)
    return np.where(y == 0, zero, log_1mzi + pois)


def poisson_log_pmf(y, lam):
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    return y * np.log(lam) - lam - gammaln(y + 1)


# --------------------------------------------------------------------------
# non-linear expressions


class NlDomainError(ArithmeticError):
    def __init__(self, message: str, row: int):
        super().__init__(f"{message} at row {row}")
        self.row = row


def _first_bad(mask) -> int:
    return int(np.flatnonzero(np.broadcast_to(mask, np.shape(mask)))[0]) if np.ndim(mask) else 0


def _nl_forward(e, env, n, tape):
    if isinstance(e, F.NlNum):
        val = np.full(n, e.value)
    elif isinstance(e, F.NlIdent):
        val = np.broadcast_to(np.asarray(env[e.name], dtype=float), (n,))
    elif isinstance(e, F.NlNeg):
        val = -_nl_forward(e.operand, env, n, tape)
    elif isinstance(e, F.NlCall):
        a = _nl_forward(e.arg, env, n, tape)
        if e.fun == "exp":
            val = np.exp(a)
        else:
            bad = a <= 0
            if np.any(bad):
                raise NlDomainError("log of a non-positive value", _first_bad(bad))
            val = np.log(a)
    else:
        a = _nl_forward(e.left, env, n, tape)
        b = _nl_forward(e.right, env, n, tape)
        op = e.op
        if op == "+":
            val = a + b
        elif op == "-":
            val = a - b
        elif op == "*":
            val = a * b
        elif op == "/":
            bad = b == 0
            if np.any(bad):
                raise NlDomainError("division by zero", _first_bad(bad))
            val = a / b
        else:
            int_exp = isinstance(e.right, F.NlNum) and float(e.right.value).is_integer()
            if int_exp:
                val = np.power(a, e.right.value)
            else:
                bad = a < 0
                if np.any(bad):
                    raise NlDomainError("negative base with non-integer exponent", _first_bad(bad))
                with np.errstate(divide="ignore"):
                    val = np.where(a > 0, np.exp(b * np.log(np.where(a > 0, a, 1.0))), np.where(b > 0, 0.0, np.inf))
    tape[id(e)] = val
    return val


def _nl_backward(e, adj, tape, grads):
    """Accumulate d(output)/d(identifier) * adj into ``grads``."""
    if isinstance(e, F.NlNum):
        return
    if isinstance(e, F.NlIdent):
        grads[e.name] = grads.get(e.name, 0.0) + adj
        return
    if isinstance(e, F.NlNeg):
        _nl_backward(e.operand, -adj, tape, grads)
        return
    val = tape[id(e)]
    if isinstance(e, F.NlCall):
        a = tape[id(e.arg)]
        _nl_backward(e.arg, adj * (val if e.fun == "exp" else 1.0 / a), tape, grads)
        return
    a, b = tape[id(e.left)], tape[id(e.right)]
    op = e.op
    if op == "+":
        _nl_backward(e.left, adj, tape, grads)
        _nl_backward(e.right, adj, tape, grads)
    elif op == "-":
        _nl_backward(e.left, adj, tape, grads)
        _nl_backward(e.right, -adj, tape, grads)
    elif op == "*":
        _nl_backward(e.left, adj * b, tape, grads)
        _nl_backward(e.right, adj * a, tape, grads)
    elif op == "/":
        _nl_backward(e.left, adj / b, tape, grads)
        _nl_backward(e.right, -adj * val / b, tape, grads)
    else:
        if isinstance(e.right, F.NlNum) and float(e.right.value).is_integer():
            k = e.right.value
            _nl_backward(e.left, adj * k * np.power(a, k - 1), tape, grads)
            return
        pos = a > 0
        safe = np.where(pos, a, 1.0)
        _nl_backward(e.left, np.where(pos, adj * b * val / safe, 0.0), tape, grads)
        _nl_backward(e.right, np.where(pos, adj * val * np.log(safe), 0.0), tape, grads)


def eval_nl(expr, env: dict, n: int | None = None) -> np.ndarray:
    """Evaluate a literal non-linear expression rowwise; raises NlDomainError."""
    if n is None:
        n = max([np.size(v) for v in env.values()] + [1])
    with np.errstate(all="ignore"):
        return _nl_forward(expr, env, n, {}).copy()


def eval_nl_grad(expr, env: dict, adj, n: int):
    tape: dict = {}
    with np.errstate(all="ignore"):
        val = _nl_forward(expr, env, n, tape)
        grads: dict = {}
        _nl_backward(expr, np.broadcast_to(adj, (n,)).astype(float), tape, grads)
    return val, grads


# --------------------------------------------------------------------------
# parameter space


@dataclass(frozen=True)
class Segment:
    key: str  # e.g. "b:mu", "bs:sx_1", "logsds:sx_1", "zs:sx_1", "logsd:0", "cor:0", "z:0", "sigma", "zi"
    offset: int
    size: int
    labels: tuple[str, ...]

    @property
    def sl(self) -> slice:
        return slice(self.offset, self.offset + self.size)


class ParamSpace:
    """Bijection between the flat unconstrained vector and named parameters."""

    def __init__(self, design: DesignSet):
        self.design = design
        segs: list[Segment] = []
        off = 0

        def add(key, labels):
            nonlocal off
            segs.append(Segment(key, off, len(labels), tuple(labels)))
            off += len(labels)

        for owner, fb in design.fixed.items():
            add(f"b:{owner}", [f"b_{prefix(owner)}{c}" for c in fb.column_names])
            for sm in design.smooths[owner]:
                add(f"bs:{sm.name}", [f"bs_{sm.name}"] * sm.Xs.shape[1])
                add(f"logsds:{sm.name}", [f"log_sds_{sm.name}"])
                add(f"zs:{sm.name}", [f"zs_{sm.name}[{j + 1}]" for j in range(sm.Zs.shape[1])])
        for k, b in enumerate(design.random):
            names = b.coef_names()
            add(f"logsd:{k}", [f"log_sd_{b.label}__{c}" for c in names])
            if b.correlated:
                add(f"cor:{k}", [f"Lraw_{b.label}[{r + 1},{j + 1}]" for r in range(1, b.q) for j in range(r)])
            add(f"z:{k}", [f"z_{b.label}[{lev},{c}]" for lev in b.levels for c in names])
        fam = design.family
        if "sigma" in fam.dpars and "sigma" not in design.spec.dpar_formulas:
            add("sigma", ["log_sigma"])
        if "zi" in fam.dpars and "zi" not in design.spec.dpar_formulas:
            add("zi", ["logit_zi"])
        self.segments = segs
        self.by_key = {s.key: s for s in segs}
        self.dim = off

    def __getitem__(self, key) -> Segment:
        return self.by_key[key]

    def __contains__(self, key):
        return key in self.by_key

    def unconstrained_names(self) -> list[str]:
        return [lab for s in self.segments for lab in s.labels]

    def constrained(self, theta: np.ndarray) -> tuple[list[str], np.ndarray]:
        """Named constrained-scale parameters (population, scale, correlation, then effects)."""
        ds = self.design
        names, vals = [], []
        for owner, fb in ds.fixed.items():
            seg = self[f"b:{owner}"]
            names += list(seg.labels)
            vals += list(theta[seg.sl])
        for owner in ds.fixed:
            for sm in ds.smooths[owner]:
                names.append(f"bs_{sm.name}")
                vals.append(theta[self[f"bs:{sm.name}"].sl][0])
        for owner in ds.fixed:
            for sm in ds.smooths[owner]:
                names.append(f"sds_{sm.name}")
                vals.append(math.exp(theta[self[f"logsds:{sm.name}"].sl][0]))
        for k, b in enumerate(ds.random):
            cn = b.coef_names()
            sd = np.exp(theta[self[f"logsd:{k}"].sl])
            names += [f"sd_{b.label}__{c}" for c in cn]
            vals += list(sd)
            if b.correlated:
                L = cholesky_from_unconstrained(theta[self[f"cor:{k}"].sl], b.q)
                C = L @ L.T
                for j in range(1, b.q):
                    for i in range(j):
                        names.append(f"cor_{b.label}__{cn[i]}__{cn[j]}")
                        vals.append(C[i, j])
        if "sigma" in self:
            names.append("sigma")
            vals.append(math.exp(theta[self["sigma"].sl][0]))
        if "zi" in self:
            names.append("zi")
            vals.append(float(expit(theta[self["zi"].sl][0])))
        for k, b in enumerate(ds.random):
            U = self.group_effects(theta, k)
            cn = b.coef_names()
            for g, lev in enumerate(b.levels):
                for c in range(b.q):
                    names.append(f"r_{b.label}[{lev},{cn[c]}]")
                    vals.append(U[g, c])
        for owner in ds.fixed:
            for sm in ds.smooths[owner]:
                sds = math.exp(theta[self[f"logsds:{sm.name}"].sl][0])
                zs = theta[self[f"zs:{sm.name}"].sl]
                names += [f"s_{sm.name}[{j + 1}]" for j in range(len(zs))]
                vals += list(sds * zs)
        return names, np.asarray(vals, dtype=float)

    def unconstrain(self, values: dict) -> np.ndarray:
        """Inverse of :meth:`constrained` given a name -> value mapping."""
        ds = self.design
        theta = np.zeros(self.dim)
        for owner in ds.fixed:
            seg = self[f"b:{owner}"]
            theta[seg.sl] = [values[n] for n in seg.labels]
            for sm in ds.smooths[owner]:
                theta[self[f"bs:{sm.name}"].sl] = values[f"bs_{sm.name}"]
                sds = values[f"sds_{sm.name}"]
                theta[self[f"logsds:{sm.name}"].sl] = math.log(sds)
                s = np.array([values[f"s_{sm.name}[{j + 1}]"] for j in range(sm.Zs.shape[1])])
                theta[self[f"zs:{sm.name}"].sl] = s / sds
        for k, b in enumerate(ds.random):
            cn = b.coef_names()
            sd = np.array([values[f"sd_{b.label}__{c}"] for c in cn])
            theta[self[f"logsd:{k}"].sl] = np.log(sd)
            L = np.eye(b.q)
            if b.correlated:
                C = np.eye(b.q)
                for j in range(1, b.q):
                    for i in range(j):
                        C[i, j] = C[j, i] = values[f"cor_{b.label}__{cn[i]}__{cn[j]}"]
                L = np.linalg.cholesky(C)
                theta[self[f"cor:{k}"].sl] = unconstrain_cholesky(L)
            U = np.array([[values[f"r_{b.label}[{lev},{c}]"] for c in cn] for lev in b.levels])
            z = np.linalg.solve(sd[:, None] * L, U.T).T
            theta[self[f"z:{k}"].sl] = z.ravel()
        if "sigma" in self:
            theta[self["sigma"].sl] = math.log(values["sigma"])
        if "zi" in self:
            zi = values["zi"]
            theta[self["zi"].sl] = math.log(zi) - math.log1p(-zi)
        return theta

    def group_effects(self, theta: np.ndarray, k: int) -> np.ndarray:
        b = self.design.random[k]
        sd = np.exp(theta[self[f"logsd:{k}"].sl])
        L = cholesky_from_unconstrained(theta[self[f"cor:{k}"].sl], b.q) if b.correlated else np.eye(b.q)
        z = theta[self[f"z:{k}"].sl].reshape(b.n_levels, b.q)
        return z @ (sd[:, None] * L).T

    def constrained_names(self) -> list[str]:
        return self.constrained(np.zeros(self.dim))[0]


# --------------------------------------------------------------------------
# the model


@dataclass
class Evaluation:
    """Intermediate quantities of one log-density evaluation."""

    lp: float
    grad: np.ndarray | None
    dpars: dict = field(default_factory=dict)
    loglik: np.ndarray | None = None


class Model:
    """Joint log posterior of a compiled design."""

    def __init__(self, design: DesignSet):
        self.design = design
        self.space = ParamSpace(design)
        self.spec = design.spec
        self.family = design.family
        self._priors = self._resolve_priors()
        if design.y is not None:
            self._y = design.y
            self._lgy = gammaln(design.y + 1)

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def priors(self) -> dict:
        """Segment key -> list of prior distributions (None is flat)."""
        return dict(self._priors)

    # -- priors -----------------------------------------------------------
    def _resolve_priors(self):
        spec = self.spec
        ds = self.design
        out = {}
        for owner, fb in ds.fixed.items():
            dists = []
            for c in fb.column_names:
                if c == "Intercept" and owner not in spec.nlpar_formulas:
                    dists.append(find_prior(spec, "Intercept", owner, None) or DEFAULT_INTERCEPT)
                else:
                    dists.append(find_prior(spec, "b", owner, c))
            out[f"b:{owner}"] = dists
            for sm in ds.smooths[owner]:
                out[f"bs:{sm.name}"] = [find_prior(spec, "b", owner, sm.name)]
                out[f"logsds:{sm.name}"] = [find_prior(spec, "sds", owner, sm.name) or DEFAULT_SCALE]
        for k, b in enumerate(ds.random):
            out[f"logsd:{k}"] = [
                find_prior(spec, "sd", o, c, b.spec.grouping.label) or DEFAULT_SCALE for o, c in b.coefs
            ]
            if b.correlated:
                out[f"cor:{k}"] = [find_prior(spec, "cor", MU, None, b.spec.grouping.label) or DEFAULT_COR]
        if "sigma" in self.space:
            out["sigma"] = [find_prior(spec, "sigma") or DEFAULT_SCALE]
        if "zi" in self.space:
            out["zi"] = [find_prior(spec, "zi")]
        return out

    def prior_table(self) -> list[tuple[str, str]]:
        """(parameter label, prior text) pairs; 'flat' for improper uniform priors."""
        rows = []
        for key, dists in self._priors.items():
            seg = self.space[key]
            labels = seg.labels if key.startswith(("b:", "logsd:")) else seg.labels[:1]
            for lab, d in zip(labels, dists):
                if key == "zi" and d is None:
                    rows.append((lab, "uniform(0, 1)"))
                else:
                    rows.append((lab, "flat" if d is None else str(d)))
        return rows

    def _log_prior(self, theta, grad):
        lp = 0.0
        sp = self.space
        for key, dists in self._priors.items():
            seg = sp[key]
            x = theta[seg.sl]
            if key.startswith(("b:", "bs:")):
                for i, d in enumerate(dists):
                    if d is not None:
                        v, dv = prior_logpdf(d, x[i])
                        lp += float(v)
                        grad[seg.offset + i] += dv
            elif key.startswith(("logsd:", "logsds:")) or key == "sigma":
                s = np.exp(x)
                for i, d in enumerate(dists):
                    v, dv = prior_logpdf(d, s[i], positive=True)
                    lp += float(v) + x[i]  # + log-Jacobian of exp
                    grad[seg.offset + i] += dv * s[i] + 1.0
            elif key.startswith("cor:"):
                k = int(key.split(":")[1])
                K = self.design.random[k].q
                eta = dists[0].params[0]
                lp -= log_lkj_const(K, eta)
                c = (K + 2 * eta - 1) / 2  # lkj exponent plus the row-map Jacobian
                o = 0
                for r in range(1, K):
                    v = x[o : o + r]
                    s2 = 1.0 + float(v @ v)
                    lp -= c * math.log(s2)
                    grad[seg.offset + o : seg.offset + o + r] -= 2 * c * v / s2
                    o += r
            elif key == "zi":
                d = dists[0]
                z = float(expit(x[0]))
                # log-Jacobian of the logit transform
                lp += float(log_expit(x[0]) + log_expit(-x[0]))
                grad[seg.offset] += 1 - 2 * z
                if d is not None:
                    v, dv = prior_logpdf(d, z)
                    lp += float(v)
                    grad[seg.offset] += dv * z * (1 - z)
        # standardized effects
        for seg in sp.segments:
            if seg.key.startswith(("z:", "zs:")):
                x = theta[seg.sl]
                lp += -0.5 * float(x @ x) - 0.5 * seg.size * LOG_2PI
                grad[seg.sl] -= x
        return lp

    # -- predictors -------------------------------------------------------
    def linear_predictors(self, theta, design: DesignSet | None = None, include_groups: bool = True, rng=None):
        """Per-owner additive predictors. Returns (etas, cache).

        With ``rng``, group levels unseen in training get effects drawn from
        the fitted group distribution; otherwise their effects are zero.
        """
        ds = design or self.design
        sp = self.space
        n = ds.n
        etas, cache = {}, {"smooth": {}, "random": {}}
        for owner, fb in ds.fixed.items():
            eta = fb.X @ theta[sp[f"b:{owner}"].sl] if fb.p else np.zeros(n)
            for sm in ds.smooths[owner]:
                sds = math.exp(theta[sp[f"logsds:{sm.name}"].sl][0])
                zs = theta[sp[f"zs:{sm.name}"].sl]
                eta = eta + sm.Xs @ theta[sp[f"bs:{sm.name}"].sl] + sm.Zs @ (sds * zs)
                cache["smooth"][sm.name] = (sds, zs)
            etas[owner] = eta
        if not include_groups:
            return etas, cache
        for k, b in enumerate(ds.random):
            sd = np.exp(theta[sp[f"logsd:{k}"].sl])
            L = cholesky_from_unconstrained(theta[sp[f"cor:{k}"].sl], b.q) if b.correlated else np.eye(b.q)
            z = theta[sp[f"z:{k}"].sl].reshape(b.n_levels, b.q)
            M = sd[:, None] * L
            U = z @ M.T
            if b.new_levels:
                znew = rng.standard_normal((len(b.new_levels), b.q)) if rng is not None else np.zeros((len(b.new_levels), b.q))
                U = np.vstack([U, znew @ M.T])
            contrib = block_effects(b.idx, b.w, b.Xr, U)
            for c, (owner, _) in enumerate(b.coefs):
                etas[owner] = etas[owner] + contrib[:, c]
            cache["random"][k] = (sd, L, z, M)
        return etas, cache

    def dpar_values(self, theta, design: DesignSet | None = None, include_groups: bool = True, rng=None) -> dict:
        """Per-observation distributional parameters on their natural scale."""
        ds = design or self.design
        etas, _ = self.linear_predictors(theta, ds, include_groups, rng)
        fam = self.family
        if self.spec.is_nonlinear:
            env = dict(ds.covariates)
            env.update({k: etas[k] for k in self.spec.nlpar_formulas})
            eta_mu = eval_nl(self.spec.main_formula.rhs, env, ds.n)
        else:
            eta_mu = etas[MU]
        out = {"mu": link_inverse(fam.link("mu"), eta_mu), "eta_mu": eta_mu}
        for dp in fam.dpars:
            if dp == "mu":
                continue
            if dp in etas:
                out[dp] = link_inverse(fam.link(dp), etas[dp])
            else:
                x = theta[self.space[dp].sl][0]
                out[dp] = np.full(ds.n, link_inverse(fam.link(dp), x))
        return out

    # -- likelihood -------------------------------------------------------
    def _loglik_parts(self, y, lgy, eta_mu, dp):
        """Pointwise log-likelihood and its derivatives w.r.t. each dpar's linear predictor."""
        fam = self.family
        link = fam.link("mu")
        g = {}
        if fam.name == "gaussian":
            mu = link_inverse(link, eta_mu)
            sigma = dp["sigma"]
            r = (y - mu) / sigma
            ll = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * r * r
            dmu = r / sigma
            g["mu"] = dmu if link == "identity" else dmu * mu
            g["sigma"] = -1.0 + r * r
        elif fam.name == "poisson":
            if link == "log":
                lam = np.exp(eta_mu)
                ll = y * eta_mu - lam - lgy
                g["mu"] = y - lam
            else:
                lam = eta_mu
                with np.errstate(all="ignore"):
                    ll = np.where(lam > 0, y * np.log(np.where(lam > 0, lam, 1.0)) - lam - lgy, -np.inf)
                    g["mu"] = y / lam - 1.0
        else:
            lam = np.exp(eta_mu)
            zi = dp["zi"]
            eta_zi = dp["eta_zi"]
            log_zi = log_expit(eta_zi)
            log_1m = log_expit(-eta_zi)
            pos = y > 0
            logA = np.logaddexp(log_zi, log_1m - lam)
            ll = np.where(pos, log_1m + y * eta_mu - lam - lgy, logA)
            p0 = np.exp(log_zi - logA)
            p1 = 1.0 - p0
            g["mu"] = np.where(pos, y - lam, -lam * p1)
            g["zi"] = np.where(pos, -zi, p0 * (1 - zi) - p1 * zi)
        return ll, g

    def _evaluate(self, theta: np.ndarray, with_grad: bool = True) -> Evaluation:
        ds = self.design
        sp = self.space
        fam = self.family
        n = ds.n
        grad = np.zeros(sp.dim)
        lp = self._log_prior(theta, grad)
        etas, cache = self.linear_predictors(theta)

        nl_tape = None
        if self.spec.is_nonlinear:
            env = dict(ds.covariates)
            env.update({k: etas[k] for k in self.spec.nlpar_formulas})
            nl_tape = {}
            with np.errstate(all="ignore"):
                eta_mu = _nl_forward(self.spec.main_formula.rhs, env, n, nl_tape)
        else:
            eta_mu = etas[MU]
        dp = {}
        for name in fam.dpars:
            if name == "mu":
                continue
            eta = etas[name] if name in etas else np.full(n, theta[sp[name].sl][0])
            dp[f"eta_{name}"] = eta
            dp[name] = link_inverse(fam.link(name), eta)
        ll, g = self._loglik_parts(self._y, self._lgy, eta_mu, dp)
        w = ds.weights
        if w is not None:
            ll = ll * w
            g = {k: v * w for k, v in g.items()}
        lp += float(ll.sum())
        ev = Evaluation(lp, None, dp, ll)
        if not with_grad:
            return ev

        geta = {}
        if self.spec.is_nonlinear:
            nlg: dict = {}
            with np.errstate(all="ignore"):
                _nl_backward(self.spec.main_formula.rhs, g["mu"], nl_tape, nlg)
            for k in self.spec.nlpar_formulas:
                geta[k] = np.broadcast_to(nlg.get(k, 0.0), (n,))
        else:
            geta[MU] = g["mu"]
        for name in fam.dpars:
            if name == "mu":
                continue
            if name in etas:
                geta[name] = g[name]
            else:
                grad[sp[name].offset] += float(g[name].sum())

        for owner, fb in ds.fixed.items():
            ge = geta[owner]
            if fb.p:
                grad[sp[f"b:{owner}"].sl] += fb.X.T @ ge
            for sm in ds.smooths[owner]:
                sds, zs = cache["smooth"][sm.name]
                grad[sp[f"bs:{sm.name}"].sl] += sm.Xs.T @ ge
                v = sm.Zs.T @ ge
                grad[sp[f"zs:{sm.name}"].sl] += sds * v
                grad[sp[f"logsds:{sm.name}"].offset] += sds * float(zs @ v)
        for k, b in enumerate(ds.random):
            sd, L, z, M = cache["random"][k]
            G = b.n_levels
            GU = np.zeros((G, b.q))
            for c, (owner, _) in enumerate(b.coefs):
                gc = geta[owner] * b.Xr[:, c]
                for j in range(b.idx.shape[1]):
                    GU[:, c] += np.bincount(b.idx[:, j], weights=b.w[:, j] * gc, minlength=G)
            grad[sp[f"z:{k}"].sl] += (GU @ M).ravel()
            dM = GU.T @ z
            dsd = (dM * L).sum(axis=1)
            grad[sp[f"logsd:{k}"].sl] += dsd * sd
            if b.correlated:
                dL = sd[:, None] * dM
                seg = sp[f"cor:{k}"]
                v_all = theta[seg.sl]
                o = 0
                for r in range(1, b.q):
                    v = v_all[o : o + r]
                    nn = math.sqrt(1.0 + float(v @ v))
                    doff = dL[r, :r]
                    dv = (doff - v * float(v @ doff) / nn**2) / nn - dL[r, r] * v / nn**3
                    grad[seg.offset + o : seg.offset + o + r] += dv
                    o += r
        ev.grad = grad
        return ev

    # -- public -----------------------------------------------------------
    def log_density(self, theta) -> float:
        return self.log_density_grad(theta, with_grad=False)[0]

    def log_density_grad(self, theta, with_grad: bool = True):
        """Log posterior (up to the model evidence) and its gradient.

        Non-finite results and domain errors give ``(-inf, zeros)``.
        """
        theta = np.asarray(theta, dtype=float)
        try:
            with np.errstate(all="ignore"):
                ev = self._evaluate(theta, with_grad)
        except (NlDomainError, FloatingPointError, OverflowError):
            return -math.inf, np.zeros(self.dim)
        if not math.isfinite(ev.lp) or (with_grad and not np.all(np.isfinite(ev.grad))):
            return -math.inf, np.zeros(self.dim)
        return ev.lp, ev.grad

    def __call__(self, theta):
        return self.log_density_grad(theta)

    def pointwise_loglik(self, theta, design: DesignSet | None = None) -> np.ndarray:
        """Per-observation log-likelihood (times observation weights)."""
        ds = design or self.design
        if ds is self.design:
            with np.errstate(all="ignore"):
                return self._evaluate(np.asarray(theta, float), with_grad=False).loglik
        other = Model.__new__(Model)
        other.__dict__.update(self.__dict__)
        other.design = ds
        other._y = ds.y
        other._lgy = gammaln(ds.y + 1)
        with np.errstate(all="ignore"):
            return other._evaluate(np.asarray(theta, float), with_grad=False).loglik
