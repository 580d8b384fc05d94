"""No-U-Turn sampling with multinomial trajectory sampling.

Warmup follows the usual windowed scheme: a fast initial buffer tunes the
step size only, a sequence of doubling slow windows estimates a diagonal
inverse metric, and a terminal buffer re-tunes the step size for the final
metric. Step sizes are adapted by dual averaging towards ``adapt_delta``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iter: int = 2000
    warmup: int = 1000
    adapt_delta: float = 0.8
    max_treedepth: int = 10
    seed: int = 0
    thin: int = 1
    init_radius: float = 2.0
    cores: int = 1

    def __post_init__(self):
        if not 0 < self.adapt_delta < 1:
            raise ValueError("adapt_delta must lie in (0, 1)")
        if self.warmup < 0 or self.warmup >= self.iter:
            raise ValueError("need 0 <= warmup < iter")
        if self.chains < 1 or self.thin < 1 or self.max_treedepth < 1:
            raise ValueError("chains, thin and max_treedepth must be positive")

    @property
    def kept(self) -> int:
        return len(range(0, self.iter - self.warmup, self.thin))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ChainResult:
    draws: np.ndarray  # kept x dim, unconstrained
    lp: np.ndarray
    accept_stat: np.ndarray
    treedepth: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    warmup_divergences: int = 0


class DualAveraging:
    def __init__(self, delta: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa
        self.mu = math.log(10.0)
        self.restart()

    def restart(self):
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def learn(self, stat: float) -> float:
        self.counter += 1
        stat = min(1.0, stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1 - eta) * self.s_bar + eta * (self.delta - stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    def final(self) -> float:
        return math.exp(self.x_bar)


class WindowedVariance:
    """Slow-window schedule and regularized variance estimates."""

    def __init__(self, num_warmup: int, init_buffer=75, term_buffer=50, base_window=25):
        self.num_warmup = num_warmup
        if num_warmup < 20:
            self.active = False
            return
        self.active = True
        if init_buffer + base_window + term_buffer > num_warmup:
            init_buffer = int(0.15 * num_warmup)
            term_buffer = int(0.1 * num_warmup)
            base_window = num_warmup - (init_buffer + term_buffer)
        self.init_buffer, self.term_buffer, self.base_window = init_buffer, term_buffer, base_window
        self.counter = 0
        self.window_size = base_window
        self.next_window = init_buffer + base_window - 1
        self._reset()

    def _reset(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def _in_window(self):
        return (
            self.counter >= self.init_buffer
            and self.counter < self.num_warmup - self.term_buffer
            and self.counter != self.num_warmup
        )

    def _end_window(self):
        return self.counter == self.next_window and self.counter != self.num_warmup

    def _compute_next(self):
        last = self.num_warmup - self.term_buffer - 1
        if self.next_window == last:
            return
        self.window_size *= 2
        self.next_window = self.counter + self.window_size
        if self.next_window != last and self.next_window + 2 * self.window_size >= self.num_warmup - self.term_buffer:
            self.next_window = last

    def learn(self, q: np.ndarray):
        """Feed one warmup draw; returns a new inverse metric at window ends, else None."""
        if not self.active:
            return None
        if self._in_window():
            self.n += 1
            if self.mean is None:
                self.mean = np.zeros_like(q)
                self.m2 = np.zeros_like(q)
            delta = q - self.mean
            self.mean += delta / self.n
            self.m2 += delta * (q - self.mean)
        if self._end_window():
            self._compute_next()
            n = self.n
            var = self.m2 / (n - 1) if n > 1 else np.ones_like(q)
            var = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            self._reset()
            self.counter += 1
            return var
        self.counter += 1
        return None


class _Point:
    __slots__ = ("q", "p", "lp", "grad")

    def __init__(self, q, p, lp, grad):
        self.q, self.p, self.lp, self.grad = q, p, lp, grad


class NUTS:
    """One chain of NUTS over ``logp_grad(q) -> (lp, grad)``."""

    def __init__(self, logp_grad: Callable, dim: int, rng: np.random.Generator, max_treedepth: int = 10):
        self.f = logp_grad
        self.dim = dim
        self.rng = rng
        self.max_treedepth = max_treedepth
        self.inv_metric = np.ones(dim)
        self.eps = 1.0

    # Hamiltonian pieces
    def _kinetic(self, p):
        return 0.5 * float(p @ (self.inv_metric * p))

    def _hamiltonian(self, z: _Point):
        if not math.isfinite(z.lp):
            return math.inf
        return -z.lp + self._kinetic(z.p)

    def _momentum(self):
        return self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)

    def _leapfrog(self, z: _Point, eps: float) -> _Point:
        p = z.p + 0.5 * eps * z.grad
        q = z.q + eps * self.inv_metric * p
        lp, g = self.f(q)
        p = p + 0.5 * eps * g
        return _Point(q, p, lp, g)

    def init_stepsize(self, z: _Point):
        """Double or halve eps until one leapfrog step crosses acceptance 0.8."""
        z0 = _Point(z.q, self._momentum(), z.lp, z.grad)
        H0 = self._hamiltonian(z0)
        z1 = self._leapfrog(z0, self.eps)
        dH = H0 - self._hamiltonian(z1)
        direction = 1 if dH > math.log(0.8) else -1
        for _ in range(200):
            z0 = _Point(z.q, self._momentum(), z.lp, z.grad)
            H0 = self._hamiltonian(z0)
            self.eps = 2 * self.eps if direction == 1 else 0.5 * self.eps
            if self.eps > 1e7:
                raise SamplerError("posterior appears improper: step size diverged")
            if self.eps == 0:
                raise SamplerError("no acceptably small step size found")
            z1 = self._leapfrog(z0, self.eps)
            h = self._hamiltonian(z1)
            dH = H0 - h if math.isfinite(h) else -math.inf
            if direction == 1 and not dH > math.log(0.8):
                break
            if direction == -1 and not dH < math.log(0.8):
                break

    @staticmethod
    def _criterion(ps_minus, ps_plus, rho):
        return float(ps_plus @ rho) > 0 and float(ps_minus @ rho) > 0

    def _build(self, depth, sign, H0):
        """Returns (valid, proposal, ps_beg, ps_end, rho, p_beg, p_end, log_sum_weight)."""
        if depth == 0:
            z = self._leapfrog(self._z, sign * self.eps)
            self._z = z
            self._n_leapfrog += 1
            h = self._hamiltonian(z)
            if math.isnan(h):
                h = math.inf
            divergent = h - H0 > MAX_DELTA_H
            if divergent:
                self._divergent = True
            lw = H0 - h
            self._sum_metro += 1.0 if lw > 0 else math.exp(lw)
            ps = self.inv_metric * z.p
            return not divergent, z, ps, ps, z.p.copy(), z.p, z.p, lw
        v1, prop1, ps_beg, ps_iend, rho1, p_beg, p_iend, lw1 = self._build(depth - 1, sign, H0)
        if not v1:
            return False, None, None, None, None, None, None, -math.inf
        v2, prop2, ps_fbeg, ps_end, rho2, p_fbeg, p_end, lw2 = self._build(depth - 1, sign, H0)
        if not v2:
            return False, None, None, None, None, None, None, -math.inf
        lw = np.logaddexp(lw1, lw2)
        if lw2 > lw or self.rng.uniform() < math.exp(lw2 - lw):
            prop = prop2
        else:
            prop = prop1
        rho = rho1 + rho2
        persist = (
            self._criterion(ps_beg, ps_end, rho)
            and self._criterion(ps_beg, ps_fbeg, rho1 + p_fbeg)
            and self._criterion(ps_iend, ps_end, rho2 + p_iend)
        )
        return persist, prop, ps_beg, ps_end, rho, p_beg, p_end, lw

    def transition(self, q, lp, grad):
        z = _Point(q, self._momentum(), lp, grad)
        H0 = self._hamiltonian(z)
        z_fwd = z_bck = z
        sample = z
        ps = self.inv_metric * z.p
        p_fwd_fwd = p_fwd_bck = p_bck_fwd = p_bck_bck = z.p
        ps_fwd_fwd = ps_fwd_bck = ps_bck_fwd = ps_bck_bck = ps
        rho = z.p.copy()
        log_sum_weight = 0.0
        depth = 0
        self._n_leapfrog = 0
        self._sum_metro = 0.0
        self._divergent = False
        while depth < self.max_treedepth:
            if self.rng.uniform() > 0.5:
                self._z = z_fwd
                rho_bck = rho
                p_bck_fwd, ps_bck_fwd = p_fwd_bck, ps_fwd_bck
                valid, prop, ps_fwd_bck, ps_fwd_fwd, rho_fwd, p_fwd_bck, p_fwd_fwd, lw = self._build(depth, 1, H0)
                z_fwd = self._z
            else:
                self._z = z_bck
                rho_fwd = rho
                p_fwd_bck, ps_fwd_bck = p_bck_fwd, ps_bck_fwd
                valid, prop, ps_bck_fwd, ps_bck_bck, rho_bck, p_bck_fwd, p_bck_bck, lw = self._build(depth, -1, H0)
                z_bck = self._z
            if not valid:
                break
            depth += 1
            if lw > log_sum_weight or self.rng.uniform() < math.exp(lw - log_sum_weight):
                sample = prop
            log_sum_weight = np.logaddexp(log_sum_weight, lw)
            rho = rho_bck + rho_fwd
            persist = (
                self._criterion(ps_bck_bck, ps_fwd_fwd, rho)
                and self._criterion(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
                and self._criterion(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
            )
            if not persist:
                break
        accept = self._sum_metro / max(self._n_leapfrog, 1)
        return sample, accept, depth, self._n_leapfrog, self._divergent


def _initial_point(f, dim, rng, radius, tries=100):
    for _ in range(tries):
        q = rng.uniform(-radius, radius, dim) if radius > 0 else np.zeros(dim)
        lp, g = f(q)
        if math.isfinite(lp) and np.all(np.isfinite(g)):
            return q, lp, g
    raise SamplerError(f"no finite log density among {tries} random inits in [-{radius}, {radius}]")


def run_chain(f, dim, config: SamplerConfig, seed_seq, init=None) -> ChainResult:
    rng = np.random.default_rng(seed_seq)
    if init is not None:
        q = np.asarray(init, dtype=float)
        lp, g = f(q)
        if not math.isfinite(lp):
            raise SamplerError("log density is not finite at the supplied init")
    else:
        q, lp, g = _initial_point(f, dim, rng, config.init_radius)
    s = NUTS(f, dim, rng, config.max_treedepth)
    da = DualAveraging(config.adapt_delta)
    wv = WindowedVariance(config.warmup)
    if config.warmup > 0:
        s.init_stepsize(_Point(q, None, lp, g))
        da.mu = math.log(10 * s.eps)
    kept = config.kept
    out = ChainResult(
        np.empty((kept, dim)), np.empty(kept), np.empty(kept), np.empty(kept, dtype=np.int64),
        np.empty(kept, dtype=np.int64), np.zeros(kept, dtype=bool), 0.0, s.inv_metric,
    )
    k = 0
    for it in range(config.iter):
        z, accept, depth, nleap, div = s.transition(q, lp, g)
        q, lp, g = z.q, z.lp, z.grad
        if it < config.warmup:
            out.warmup_divergences += int(div)
            s.eps = da.learn(accept)
            var = wv.learn(q)
            if var is not None:
                s.inv_metric = var
                s.init_stepsize(z)
                da.mu = math.log(10 * s.eps)
                da.restart()
            if it == config.warmup - 1:
                s.eps = da.final()
            continue
        if (it - config.warmup) % config.thin == 0:
            out.draws[k] = q
            out.lp[k] = lp
            out.accept_stat[k] = accept
            out.treedepth[k] = depth
            out.n_leapfrog[k] = nleap
            out.divergent[k] = div
            k += 1
    out.step_size = s.eps
    out.inv_metric = s.inv_metric.copy()
    return out


def _chain_job(args):
    f, dim, config, ss, init = args
    return run_chain(f, dim, config, ss, init)


def sample_chains(f, dim: int, config: SamplerConfig, inits=None) -> list[ChainResult]:
    """Run ``config.chains`` chains; seeds are split from ``config.seed`` per chain index."""
    if config.kept < 1:
        raise SamplerError("no post-warmup draws requested")
    seqs = np.random.SeedSequence(config.seed).spawn(config.chains)
    jobs = [(f, dim, config, seqs[c], None if inits is None else inits[c]) for c in range(config.chains)]
    cores = max(1, min(config.cores, config.chains))
    if cores == 1:
        return [_chain_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=cores) as ex:
        return list(ex.map(_chain_job, jobs))
