"""Differentially private average treatment effect estimation by propensity score matching."""

from .core import (
    BudgetExceeded,
    ConfigError,
    DataError,
    Dataset,
    DegenerateGroups,
    GroupCounts,
    LedgerViolation,
    PrivacyLevel,
    PrivateATEError,
    validate,
)
from .data_io import CsvSchema, SynthParams, generate_synth, load_csv, write_csv
from .dp_primitives import BudgetLedger, BudgetSplit, Composition, NoiseSource, Stream
from .estimation import AteResult, MatchConfig, MatchPlan
from .harness import SweepSpec, relative_error, run_sweep
from .pipeline import RunConfig, run, run_oracle_psm, split_budget
from .propensity import LogisticModel, NonConvergence, train

__all__ = [
    "AteResult",
    "BudgetExceeded",
    "BudgetLedger",
    "BudgetSplit",
    "Composition",
    "ConfigError",
    "CsvSchema",
    "DataError",
    "Dataset",
    "DegenerateGroups",
    "GroupCounts",
    "LedgerViolation",
    "LogisticModel",
    "MatchConfig",
    "MatchPlan",
    "NoiseSource",
    "NonConvergence",
    "PrivacyLevel",
    "PrivateATEError",
    "RunConfig",
    "Stream",
    "SweepSpec",
    "SynthParams",
    "generate_synth",
    "load_csv",
    "relative_error",
    "run",
    "run_oracle_psm",
    "run_sweep",
    "split_budget",
    "train",
    "validate",
    "write_csv",
]
