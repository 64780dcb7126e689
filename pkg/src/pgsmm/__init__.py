"""Penalized generalized semiparametric mixed models for longitudinal data.

Fixed effects are selected with a SCAD penalty, the time trend is a
truncated power spline, random effects are integrated out by Metropolis
sampling inside a Monte Carlo Newton-Raphson loop, and the tuning
parameter is chosen by generalized cross-validation.
"""

from .config import ConfigError, RunConfig, config_from_dict, dump_config, load_config
from .correlation import CorrelationKind, CorrelationSpec, build_correlation, estimate_rho
from .data import INTERCEPT, DataError, LongitudinalDataset, load_csv
from .estimating import FitResult, Problem, SingularSystemError, assemble_H, assemble_score, fit
from .families import Family, FamilyKind, LinkKind, LinkSpec
from .model import ModelSpec, SolverConfig, default_lambda_grid
from .penalty import ScadPenalty, lqa_weights, scad_derivative
from .report import FitReport, build_report
from .sampler import DrawBank, SamplerConfig, integrated_loglik, run_chain
from .simulation import (PRESETS, SimDesign, SimReport, generate_replicate, get_preset, run_replicates,
                         run_study, simulation_spec, summarize)
from .splines import KnotPlacement, SplineConfig, basis_matrix, make_knots
from .tuning import (InferenceReport, SaturatedError, TuningError, TuningReport, aic_bic,
                     effective_params, gcv_score, sandwich_covariance, select_lambda)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "RunConfig", "config_from_dict", "dump_config", "load_config",
    "CorrelationKind", "CorrelationSpec", "build_correlation", "estimate_rho",
    "INTERCEPT", "DataError", "LongitudinalDataset", "load_csv",
    "FitResult", "Problem", "SingularSystemError", "assemble_H", "assemble_score", "fit",
    "Family", "FamilyKind", "LinkKind", "LinkSpec",
    "ModelSpec", "SolverConfig", "default_lambda_grid",
    "ScadPenalty", "lqa_weights", "scad_derivative",
    "FitReport", "build_report",
    "DrawBank", "SamplerConfig", "integrated_loglik", "run_chain",
    "PRESETS", "SimDesign", "SimReport", "generate_replicate", "get_preset", "run_replicates", "run_study",
    "simulation_spec", "summarize",
    "KnotPlacement", "SplineConfig", "basis_matrix", "make_knots",
    "InferenceReport", "SaturatedError", "TuningError", "TuningReport", "aic_bic",
    "effective_params", "gcv_score", "sandwich_covariance", "select_lambda",
]
