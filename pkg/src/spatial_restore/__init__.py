"""Bayesian spatial survival analysis of outage restoration times."""

from .dataset import AdjacencyGraph, DataError, Dataset, parse_adjacency, parse_dataset
from .gaft import GaftParams, ModelSpec, PriorConfig, simulate_dataset, total_log_likelihood
from .ldtfp import LdtfpTree
from .mcmc import McmcConfig, PosteriorSamples, gelman_rubin, run_mcmc
from .report import FitSummary, cpo_lpml, hpd_interval, model_compare, summarize_fit
from .spatial import global_morans_i, local_moran_analysis, permutation_test_global

__version__ = "0.1.0"

__all__ = [
    "AdjacencyGraph", "DataError", "Dataset", "parse_adjacency", "parse_dataset",
    "GaftParams", "ModelSpec", "PriorConfig", "simulate_dataset", "total_log_likelihood",
    "LdtfpTree",
    "McmcConfig", "PosteriorSamples", "gelman_rubin", "run_mcmc",
    "FitSummary", "cpo_lpml", "hpd_interval", "model_compare", "summarize_fit",
    "global_morans_i", "local_moran_analysis", "permutation_test_global",
]
