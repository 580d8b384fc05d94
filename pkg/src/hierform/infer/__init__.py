"""Posterior sampling, diagnostics, information criteria and predictions."""

from .diagnostics import ConstantParameterWarning, ess, split_chains, split_rhat
from .draws import Draws, SummaryRow, SummaryTable, summarize
from .fit import (
    EffectsGrid,
    Fit,
    MapResult,
    effects_grid,
    fit_from_chains,
    fit_model,
    map_estimate,
    pointwise_loglik,
    posterior_predict,
    raw_from_draws,
    summary_header,
)
from .loo import Comparison, ICResult, gpd_fit, ic_compare, loo, psis_weights, waic
from .nuts import ChainResult, SamplerConfig, SamplerError, run_chain, sample_chains

__all__ = [
    "ChainResult", "Comparison", "ConstantParameterWarning", "Draws", "EffectsGrid", "Fit",
    "ICResult", "MapResult", "SamplerConfig", "SamplerError", "SummaryRow", "SummaryTable",
    "effects_grid", "ess", "fit_from_chains", "fit_model", "gpd_fit", "ic_compare", "loo",
    "map_estimate", "pointwise_loglik", "posterior_predict", "psis_weights", "raw_from_draws",
    "run_chain", "sample_chains", "split_chains", "split_rhat", "summarize", "summary_header", "waic",
]
