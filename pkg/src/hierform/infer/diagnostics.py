"""Convergence diagnostics: split R-hat and effective sample size."""

from __future__ import annotations

import math
import warnings

import numpy as np


class ConstantParameterWarning(UserWarning):
    pass


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected draws shaped (chains, draws)")
    return x


def split_chains(x) -> np.ndarray:
    """Split each chain in halves (dropping the middle draw of odd-length chains)."""
    x = _as_chains(x)
    n = x.shape[1]
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half :]], axis=0)


def split_rhat(x) -> float:
    """Potential scale reduction over split chains, sqrt((W (n-1)/n + B/n) / W).

    A single chain is split in two. Constant draws give NaN (with a
    warning); zero within-chain but positive between-chain variance gives inf.
    """
    s = split_chains(x)
    m, n = s.shape
    if n < 2:
        raise ValueError("split R-hat needs at least 4 draws per chain")
    means = s.mean(axis=1)
    W = float(s.var(axis=1, ddof=1).mean())
    B = float(n * means.var(ddof=1)) if m > 1 else 0.0
    if W == 0:
        if B == 0:
            warnings.warn("constant parameter: R-hat undefined", ConstantParameterWarning, stacklevel=2)
            return math.nan
        return math.inf
    return math.sqrt((W * (n - 1) / n + B / n) / W)


def autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of a 1-d series via FFT."""
    n = len(x)
    size = 1 << (2 * n - 1).bit_length()
    c = x - x.mean()
    f = np.fft.rfft(c, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    return acov / n


def ess(x) -> float:
    """Effective sample size over split chains with Geyer's initial positive sequence."""
    s = split_chains(x)
    m, n = s.shape
    if n < 4:
        raise ValueError("ESS needs at least 8 draws per chain")
    acov = np.stack([autocovariance(c) for c in s])
    chain_mean = s.mean(axis=1)
    mean_var = float(np.mean(acov[:, 0]) * n / (n - 1))
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += float(chain_mean.var(ddof=1))
    if not var_plus > 0:
        return math.nan
    rho = np.zeros(n)
    rho[0] = 1.0
    mean_acov = acov.mean(axis=0)
    even = 1.0
    odd = 1.0 - (mean_var - mean_acov[1]) / var_plus
    rho[1] = odd
    t = 1
    while t < n - 5 and even + odd > 0:
        even = 1.0 - (mean_var - mean_acov[t + 1]) / var_plus
        odd = 1.0 - (mean_var - mean_acov[t + 2]) / var_plus
        if even + odd >= 0:
            rho[t + 1] = even
            rho[t + 2] = odd
        t += 2
    max_t = t
    if even > 0:
        rho[max_t + 1] = even
    # monotone sequence
    t = 1
    while t <= max_t - 4:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2
            rho[t + 2] = rho[t + 1]
        t += 2
    total = m * n
    tau = -1.0 + 2.0 * float(np.sum(rho[:max_t])) + rho[max_t + 1]
    tau = max(tau, 1.0 / math.log10(total))
    return total / tau
