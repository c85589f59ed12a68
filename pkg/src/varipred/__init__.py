"""Bayesian estimation of intra-individual variability as a predictor."""

__version__ = "0.1.0"

from .data import BetweenData, Design, DesignKind, PriorConfig, RepeatedData
from .diagnostics import DiagnosticsReport, convergence_report, ess, psrf
from .errors import VariError
from .fit import FitResult, fit
from .inference import ParameterSummary, empirical_pvalue, indirect_effect, summarize
from .model import ParameterState, VariabilityModel, initialize
from .sampler import ChainConfig, PosteriorDraws, run_chains

__all__ = [
    "BetweenData", "ChainConfig", "Design", "DesignKind", "DiagnosticsReport", "FitResult",
    "ParameterState", "ParameterSummary", "PosteriorDraws", "PriorConfig", "RepeatedData",
    "VariError", "VariabilityModel", "convergence_report", "empirical_pvalue", "ess", "fit",
    "indirect_effect", "initialize", "psrf", "run_chains", "summarize",
]
