"""Sizing, costing and comparing scaled encoder-decoder transformers.

The library covers a size registry with a shorthand grammar for scaling
operations, exact parameter and FLOP counts, Pareto analysis of measured
runs, power-law fits, and a small numpy transformer with a span-corruption
pretraining loop for desk-scale experiments.
"""

from .config import (CodeParseError, ModelConfig, ScaledSpec, ScalingOp, apply_op, format_code,
                     lookup_standard, parse_code, resolve)
from .cost import (FlopsBreakdown, HardwareModel, ParamBreakdown, count_params,
                   estimate_steps_per_sec, forward_flops_per_token, train_step_flops)
from .fit import PowerLawFit, compare_fit_quality, find_inversions, fit_power_law, fit_runs
from .pareto import Frontier, deepnarrow_ladder, dominates, frontier, recommend_alternatives
from .runs import RunRecord, load_manifest, load_runs

__version__ = "0.1.0"

__all__ = [
    "CodeParseError", "ModelConfig", "ScaledSpec", "ScalingOp", "apply_op", "format_code",
    "lookup_standard", "parse_code", "resolve", "FlopsBreakdown", "HardwareModel",
    "ParamBreakdown", "count_params", "estimate_steps_per_sec", "forward_flops_per_token",
    "train_step_flops", "PowerLawFit", "compare_fit_quality", "find_inversions",
    "fit_power_law", "fit_runs", "Frontier", "deepnarrow_ladder", "dominates", "frontier",
    "recommend_alternatives", "RunRecord", "load_manifest", "load_runs",
]
