"""Shared domain types, errors and dataset validation."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class PrivateATEError(Exception):
    """Base class for every error raised by this package."""


class DataError(PrivateATEError, ValueError):
    """The input data violates a standing assumption."""


class EmptyDataset(DataError):
    pass


class CovariateOutOfRange(DataError):
    pass


class OutcomeRangeExceeded(DataError):
    pass


class DegenerateGroups(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class ConfigError(PrivateATEError, ValueError):
    """A parameter (budget, ratio, coefficient) is invalid."""


class NonPositiveBudget(ConfigError):
    pass


class NonPositiveSensitivity(ConfigError):
    pass


class InvalidRatios(ConfigError):
    pass


class BudgetExceeded(PrivateATEError):
    pass


class LedgerViolation(PrivateATEError):
    """Internal accounting assertion failed; indicates a bug, not bad input."""


class PrivacyLevel(enum.Enum):
    LABEL = "label"
    SAMPLE = "sample"

    @classmethod
    def parse(cls, value: "PrivacyLevel | str") -> "PrivacyLevel":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown privacy level {value!r}; expected 'label' or 'sample'") from None


@dataclass(frozen=True)
class GroupCounts:
    n_t: int
    n_c: int
    perturbed: bool = False

    @property
    def n(self) -> int:
        return self.n_t + self.n_c

    @property
    def n1(self) -> int:
        """Size of the larger arm."""
        return max(self.n_t, self.n_c)

    @classmethod
    def from_bits(cls, bits: np.ndarray, perturbed: bool = False) -> "GroupCounts":
        n_t = int(np.count_nonzero(bits))
        return cls(n_t=n_t, n_c=int(bits.shape[0]) - n_t, perturbed=perturbed)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observational data: binary treatment, covariates in [0, 1]^d, outcomes.

    ``outcome_range`` is the public bound B on the outcome span. It is supplied
    by the caller and never estimated from the data.
    """

    treatment: np.ndarray
    covariates: np.ndarray
    outcomes: np.ndarray
    outcome_range: float

    @property
    def n(self) -> int:
        return int(self.treatment.shape[0])

    @property
    def d(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def counts(self) -> GroupCounts:
        return GroupCounts.from_bits(self.treatment)

    @classmethod
    def from_arrays(cls, treatment, covariates, outcomes, outcome_range: float) -> "Dataset":
        """Build and validate a dataset from array-likes."""
        raw = cls(
            treatment=np.asarray(treatment),
            covariates=np.asarray(covariates, dtype=float),
            outcomes=np.asarray(outcomes, dtype=float),
            outcome_range=float(outcome_range),
        )
        return validate(raw, outcome_range)


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


def validate(dataset: Dataset, range_hint: float | None = None) -> Dataset:
    """Check the standing assumptions and return an immutable copy.

    Args:
        dataset: raw columns.
        range_hint: public outcome range B. Defaults to ``dataset.outcome_range``.

    Raises:
        EmptyDataset, DimensionMismatch, CovariateOutOfRange,
        OutcomeRangeExceeded, DegenerateGroups.
    """
    B = float(dataset.outcome_range if range_hint is None else range_hint)
    if not np.isfinite(B) or B <= 0:
        raise ConfigError(f"outcome range B must be a positive finite number, got {B}")

    t = np.asarray(dataset.treatment)
    X = np.asarray(dataset.covariates, dtype=float)
    y = np.asarray(dataset.outcomes, dtype=float)
    if t.ndim != 1 or t.shape[0] == 0:
        raise EmptyDataset("dataset has no samples")
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[0] != t.shape[0] or y.shape != t.shape:
        raise DimensionMismatch(
            f"column lengths disagree: treatment {t.shape}, covariates {X.shape}, outcomes {y.shape}"
        )
    if X.shape[1] < 1:
        raise DimensionMismatch("at least one covariate column is required")

    if not np.all((t == 0) | (t == 1)):
        bad = int(np.flatnonzero((t != 0) & (t != 1))[0])
        raise DataError(f"treatment must be 0/1; row {bad} has {t[bad]!r}")
    if not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0:
        r, c = np.argwhere(~((X >= 0.0) & (X <= 1.0)))[0]
        raise CovariateOutOfRange(f"covariate at row {r}, column {c} is {X[r, c]!r}; expected [0, 1]")
    if not np.all(np.isfinite(y)):
        raise DataError("outcomes must be finite")
    span = float(y.max() - y.min())
    if span > B:
        raise OutcomeRangeExceeded(f"outcome span {span:g} exceeds the declared range B={B:g}")

    bits = _frozen(t, np.int8)
    counts = GroupCounts.from_bits(bits)
    if counts.n_t == 0 or counts.n_c == 0:
        raise DegenerateGroups(f"both arms must be non-empty (treated={counts.n_t}, control={counts.n_c})")

    return Dataset(treatment=bits, covariates=_frozen(X, float), outcomes=_frozen(y, float), outcome_range=B)
