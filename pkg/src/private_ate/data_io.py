"""CSV ingestion and the synthetic benchmark generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import DataError, Dataset, validate


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


@dataclass(frozen=True)
class CsvSchema:
    treatment_col: str
    outcome_col: str
    covariate_cols: tuple[str, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "CsvSchema":
        """Parse ``treatment=t,outcome=y,covariates=x1;x2`` (covariates optional)."""
        fields = {}
        for part in text.split(","):
            if not part.strip():
                continue
            key, sep, value = part.partition("=")
            if not sep:
                raise SchemaError(f"schema item {part!r} is not key=value")
            fields[key.strip()] = value.strip()
        unknown = set(fields) - {"treatment", "outcome", "covariates"}
        if unknown or "treatment" not in fields or "outcome" not in fields:
            raise SchemaError(f"schema needs treatment= and outcome= (got {sorted(fields)})")
        covs = tuple(c for c in fields.get("covariates", "").split(";") if c)
        return cls(fields["treatment"], fields["outcome"], covs)


def _cell(raw: str, row: int, col: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(f"row {row}, column {col!r}: cannot parse {raw!r} as a number") from None
    if not math.isfinite(value):
        raise ParseError(f"row {row}, column {col!r}: non-finite value {raw!r}")
    return value


def load_csv(path, schema: CsvSchema, B: float) -> Dataset:
    """Read a comma-separated file with a header row into a validated Dataset.

    Rows are numbered from 1 for the first data line. When the schema lists
    no covariates, every column other than treatment and outcome is one.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        covs = schema.covariate_cols or tuple(
            h for h in header if h not in (schema.treatment_col, schema.outcome_col)
        )
        missing = [c for c in (schema.treatment_col, schema.outcome_col, *covs) if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        if not covs:
            raise SchemaError(f"{path}: no covariate columns")
        t_pos, y_pos = header.index(schema.treatment_col), header.index(schema.outcome_col)
        x_pos = [header.index(c) for c in covs]

        t, y, X = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"row {row_no}: expected {len(header)} fields, found {len(row)}")
            tv = row[t_pos].strip()
            if tv not in ("0", "1"):
                raise ParseError(f"row {row_no}, column {schema.treatment_col!r}: treatment must be 0 or 1, got {tv!r}")
            t.append(int(tv))
            y.append(_cell(row[y_pos], row_no, schema.outcome_col))
            X.append([_cell(row[p], row_no, c) for p, c in zip(x_pos, covs)])

    if not t:
        raise ParseError(f"{path}: no data rows")
    raw = Dataset(
        treatment=np.array(t),
        covariates=np.array(X, dtype=float),
        outcomes=np.array(y, dtype=float),
        outcome_range=float(B),
    )
    return validate(raw, B)


def write_csv(dataset: Dataset, path, treatment_col: str = "t", outcome_col: str = "y") -> None:
    """Write in the dialect :func:`load_csv` reads; covariates become x1..xd."""
    header = [treatment_col, outcome_col] + [f"x{j + 1}" for j in range(dataset.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for ti, yi, xi in zip(dataset.treatment, dataset.outcomes, dataset.covariates):
            w.writerow([int(ti), repr(float(yi)), *(repr(float(v)) for v in xi)])


@dataclass(frozen=True)
class SynthParams:
    """Generator settings.

    Selection bias ``a`` ~ U(a_low, a_high), outcome coefficients ``b`` ~
    U(b_low, b_high)^d and per-sample noise ``q`` ~ U(-q_half, q_half).
    """

    n: int = 1000
    d: int = 20
    tau: float = 0.5
    seed: int = 0
    a_low: float = 0.0
    a_high: float = 3.0
    b_low: float = 0.0
    b_high: float = 1.0
    q_half: float = 0.1
    bias_scale: float | None = None

    def __post_init__(self):
        if self.n < 2 or self.d < 1:
            raise ValueError(f"need n >= 2 and d >= 1 (got n={self.n}, d={self.d})")


@dataclass(frozen=True)
class SynthData:
    dataset: Dataset
    true_tau: float
    bias_scale: float
    coeffs: np.ndarray
    params: SynthParams

    def __iter__(self):
        yield self.dataset
        yield self.true_tau

    def sidecar(self) -> dict:
        return {
            "true_tau": self.true_tau,
            "params": asdict(self.params),
            "bias_scale": self.bias_scale,
            "seed": self.params.seed,
            "B": self.dataset.outcome_range,
        }


def outcome_bound(coeffs: np.ndarray, tau: float, q_half: float) -> float:
    """Width of the support of b.X + tau*T + q for X in [0,1]^d."""
    hi = float(np.clip(coeffs, 0, None).sum()) + max(tau, 0.0) + q_half
    lo = float(np.clip(coeffs, None, 0).sum()) + min(tau, 0.0) - q_half
    return hi - lo


def generate_synth(params: SynthParams = SynthParams()) -> SynthData:
    """Synthetic observational data with a known constant treatment effect.

    Covariates are U(0,1)^d. Treatment is Bernoulli(sigmoid(a * (2 * mean(X) - 1)))
    and the outcome is b.X + tau*T + q. The returned B is the width of the
    outcome's support, which depends on the parameters only, never on the draw.
    """
    rng = np.random.default_rng(params.seed)
    a = rng.uniform(params.a_low, params.a_high) if params.bias_scale is None else float(params.bias_scale)
    b = rng.uniform(params.b_low, params.b_high, size=params.d)
    X = rng.uniform(0.0, 1.0, size=(params.n, params.d))
    e = 1.0 / (1.0 + np.exp(-a * (2.0 * X.mean(axis=1) - 1.0)))
    T = (rng.uniform(size=params.n) < e).astype(np.int8)
    q = rng.uniform(-params.q_half, params.q_half, size=params.n)
    Y = X @ b + params.tau * T + q
    B = outcome_bound(b, params.tau, params.q_half)
    ds = validate(Dataset(treatment=T, covariates=X, outcomes=Y, outcome_range=B), B)
    return SynthData(dataset=ds, true_tau=float(params.tau), bias_scale=float(a), coeffs=b, params=params)


def write_sidecar(synth: SynthData, path) -> None:
    Path(path).write_text(json.dumps(synth.sidecar(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
