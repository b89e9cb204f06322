"""Differentially private synthetic tabular data refined by importance-budgeted classifiers."""

from .dp_classifier import FitConfig, LogitModel, OneVsRestLogit, fit_dp_logit, predict_label, predict_proba
from .dp_core import NON_PRIVATE, BudgetLedger, RandomStream, laplace_noise, noisy_count, parse_epsilon
from .dpsage import ImportanceReport, SageConfig, dpsage, ranking_similarity, reference_sage, sage_values
from .errors import BudgetError, ConfigError, DataError, QuailError
from .evaluation import GroupMetrics, RunReport, aggregate, evaluate
from .fairquail import FairConfig, GroupImportance, fit_fsq, groupwise_dpsage, round_robin_select, tune_threshold
from .marginal_synth import MarginalTree, SynthConfig, fit_synth, sample
from .quail import QuailConfig, QuailModel, fit_quail, generate, synthesize
from .tabular import Dataset, Feature, Schema, load_csv, load_schema, split_by_group, write_csv

__version__ = "0.1.0"

__all__ = [
    "NON_PRIVATE",
    "BudgetError",
    "BudgetLedger",
    "ConfigError",
    "DataError",
    "Dataset",
    "FairConfig",
    "Feature",
    "FitConfig",
    "GroupImportance",
    "GroupMetrics",
    "ImportanceReport",
    "LogitModel",
    "MarginalTree",
    "OneVsRestLogit",
    "QuailConfig",
    "QuailError",
    "QuailModel",
    "RandomStream",
    "RunReport",
    "SageConfig",
    "Schema",
    "SynthConfig",
    "aggregate",
    "dpsage",
    "evaluate",
    "fit_dp_logit",
    "fit_fsq",
    "fit_quail",
    "fit_synth",
    "generate",
    "groupwise_dpsage",
    "laplace_noise",
    "load_csv",
    "load_schema",
    "noisy_count",
    "parse_epsilon",
    "predict_label",
    "predict_proba",
    "ranking_similarity",
    "reference_sage",
    "round_robin_select",
    "sage_values",
    "sample",
    "split_by_group",
    "synthesize",
    "tune_threshold",
    "write_csv",
]
