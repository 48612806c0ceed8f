"""Penalized additive mixed models for grouped trajectory data."""

__version__ = "0.1.0"

from .dataset import (
    Column,
    Dataset,
    DatasetError,
    SeriesIndex,
    combine_factors,
    load_long_csv,
    make_factor,
    mark_series_starts,
    to_ordered_treatment,
    write_csv,
)
from .diagnostics import AcfTable, acf_split, profile_rho, residuals, start_value_rho
from .engine import FitError, FittedModel, ModelSpecError, fit
from .formula import FormulaError, ModelFormula, format_formula, parse_formula
from .inference import (
    ComparisonResult,
    PredictionGrid,
    SummaryTables,
    aic,
    compare_ml,
    compare_scores,
    predict_diff,
    predict_smooth,
    predict_surface,
    summarize,
)
from .simgen import HarnessReport, SimConfig, gen_words, run_power_harness, run_type1_harness

__all__ = [
    "AcfTable", "Column", "ComparisonResult", "Dataset", "DatasetError", "FitError", "FittedModel",
    "FormulaError", "HarnessReport", "ModelFormula", "ModelSpecError", "PredictionGrid", "SeriesIndex",
    "SimConfig", "SummaryTables", "acf_split", "aic", "combine_factors", "compare_ml", "compare_scores",
    "fit", "format_formula", "gen_words", "load_long_csv", "make_factor", "mark_series_starts",
    "parse_formula", "predict_diff", "predict_smooth", "predict_surface", "profile_rho", "residuals",
    "run_power_harness", "run_type1_harness", "start_value_rho", "summarize", "to_ordered_treatment",
    "write_csv",
]
