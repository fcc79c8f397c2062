"""Relative-error metric and repeated-trial sweeps over privacy settings."""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import dataclass, field, replace

from .core import ConfigError, Dataset, PrivacyLevel, PrivateATEError
from .data_io import SynthData
from .estimation import DEFAULT_NEIGHBORS, MatchConfig
from .pipeline import DEFAULT_RATIOS, RunConfig, run, run_oracle_psm
from .propensity import DEFAULT_LAMBDA

DEFAULT_EPS_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)
DEFAULT_TRIALS = 10

RESULT_COLUMNS = ("cell_id", "level", "eps", "limit_mode", "trial", "tau_hat", "tau_oracle", "re", "seconds")
SUMMARY_COLUMNS = (
    "cell_id",
    "level",
    "eps",
    "limit_mode",
    "coeff",
    "r1",
    "r2",
    "trials",
    "mean_tau_hat",
    "mean_re",
    "std_re",
)


class ZeroTrueEffect(PrivateATEError, ValueError):
    """Relative error is undefined when the reference effect is zero."""


def relative_error(tau_hat: float, tau_oracle: float) -> float:
    """|tau_hat - tau| / |tau|."""
    if tau_oracle == 0:
        raise ZeroTrueEffect("relative error needs a non-zero reference effect")
    return abs(tau_hat - tau_oracle) / abs(tau_oracle)


def parse_limit_mode(text: str | int | None) -> str:
    """Normalize ``adaptive``, ``oracle``, ``50`` or ``fixed:50``."""
    if text is None:
        return "adaptive"
    s = str(text).strip().lower()
    if s in ("adaptive", "oracle"):
        return s
    k = s.split(":", 1)[1] if s.startswith("fixed:") else s
    try:
        value = int(k)
    except ValueError:
        raise ConfigError(f"unknown limit mode {text!r}") from None
    if value < 1:
        raise ConfigError(f"fixed matching limit must be >= 1, got {value}")
    return f"fixed:{value}"


@dataclass(frozen=True)
class SweepSpec:
    """Grid of settings to evaluate, each repeated ``trials`` times.

    ``limit_modes`` holds ``adaptive``, ``fixed:k`` or ``oracle`` (noise and
    caps off). ``coeff_grid`` entries of ``None`` use the level default;
    ``alloc_grid`` holds (r1, r2) pairs with r3 = 1 - r1 - r2 and only
    applies at sample level. Trial t of every cell runs with seed
    ``seed_base + t``. ``timing`` records wall time per trial; it is off by
    default so that emitted files are reproducible.
    """

    eps_grid: tuple[float, ...] = DEFAULT_EPS_GRID
    trials: int = DEFAULT_TRIALS
    levels: tuple[PrivacyLevel, ...] = (PrivacyLevel.LABEL, PrivacyLevel.SAMPLE)
    limit_modes: tuple[str, ...] = ("adaptive",)
    coeff_grid: tuple[float | None, ...] = (None,)
    alloc_grid: tuple[tuple[float, float], ...] = (DEFAULT_RATIOS[:2],)
    seed_base: int = 0
    neighbors: int = DEFAULT_NEIGHBORS
    lam: float = DEFAULT_LAMBDA
    intercept: bool = False
    timing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "eps_grid", tuple(float(e) for e in self.eps_grid))
        object.__setattr__(self, "levels", tuple(PrivacyLevel.parse(v) for v in self.levels))
        object.__setattr__(self, "limit_modes", tuple(parse_limit_mode(m) for m in self.limit_modes))
        object.__setattr__(self, "coeff_grid", tuple(None if c is None else float(c) for c in self.coeff_grid))
        object.__setattr__(self, "alloc_grid", tuple((float(a), float(b)) for a, b in self.alloc_grid))
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        for name in ("eps_grid", "levels", "limit_modes", "coeff_grid", "alloc_grid"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")
        for r1, r2 in self.alloc_grid:
            if r1 < 0 or r2 < 0 or r1 + r2 > 1:
                raise ConfigError(f"allocation ({r1}, {r2}) leaves no valid phase-3 share")

    def cells(self) -> list["Cell"]:
        """Every distinct setting, in a fixed order.

        Label-level cells ignore the allocation grid, so only one allocation
        is emitted for them.
        """
        out = []
        for level, mode, coeff, alloc, eps in itertools.product(
            self.levels, self.limit_modes, self.coeff_grid, self.alloc_grid, self.eps_grid
        ):
            if level is PrivacyLevel.LABEL and alloc != self.alloc_grid[0]:
                continue
            out.append(Cell(f"c{len(out):04d}", level, eps, mode, coeff, alloc))
        return out

    @classmethod
    def from_text(cls, text: str) -> "SweepSpec":
        """Parse ``key=value`` lines; ``#`` starts a comment.

        Lists are comma-separated; allocations are ``r1:r2`` pairs.
        """
        kw: dict = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"spec line {line_no}: expected key=value, got {raw!r}")
            key, value = key.strip().replace("-", "_"), value.strip()
            kw.update(_spec_field(key, value, line_no))
        return cls(**kw)


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _spec_field(key: str, value: str, line_no: int) -> dict:
    try:
        if key == "eps_grid":
            return {key: tuple(float(v) for v in _split(value))}
        if key in ("trials", "seed_base", "neighbors"):
            return {key: int(value)}
        if key == "levels":
            return {key: tuple(_split(value))}
        if key == "limit_modes":
            return {key: tuple(_split(value))}
        if key == "coeff_grid":
            return {key: tuple(None if v == "default" else float(v) for v in _split(value))}
        if key == "alloc_grid":
            pairs = [v.split(":") for v in _split(value)]
            return {key: tuple((float(a), float(b)) for a, b in pairs)}
        if key in ("lam", "lambda"):
            return {"lam": float(value)}
        if key in ("intercept", "timing"):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return {key: value.lower() in ("true", "1", "yes")}
    except ValueError:
        raise ConfigError(f"spec line {line_no}: bad value {value!r} for {key}") from None
    raise ConfigError(f"spec line {line_no}: unknown key {key!r}")


@dataclass(frozen=True)
class Cell:
    cell_id: str
    level: PrivacyLevel
    eps: float
    limit_mode: str
    coeff: float | None
    alloc: tuple[float, float]

    def run_config(self, spec: SweepSpec, seed: int) -> RunConfig:
        oracle = self.limit_mode == "oracle"
        fixed = int(self.limit_mode.split(":")[1]) if self.limit_mode.startswith("fixed:") else None
        r1, r2 = self.alloc
        return RunConfig(
            level=self.level,
            eps_total=self.eps,
            ratios=(r1, r2, 1.0 - r1 - r2),
            match=MatchConfig(
                neighbors=spec.neighbors,
                error_coeff=self.coeff,
                fixed_k=fixed,
                capped=not oracle,
            ),
            lam=spec.lam,
            intercept=spec.intercept,
            seed=seed,
            oracle_mode=oracle,
        )


@dataclass(frozen=True)
class TrialRecord:
    cell: Cell
    trial: int
    seed: int
    tau_hat: float
    tau_oracle: float
    relative_error: float
    wall_time: float = 0.0
    flags: tuple[str, ...] = ()

    def row(self) -> "ResultRow":
        return ResultRow(
            self.cell.cell_id,
            self.cell.level.value,
            self.cell.eps,
            self.cell.limit_mode,
            self.trial,
            self.tau_hat,
            self.tau_oracle,
            self.relative_error,
            self.wall_time,
        )


@dataclass(frozen=True)
class ResultRow:
    """One line of the results CSV."""

    cell_id: str
    level: str
    eps: float
    limit_mode: str
    trial: int
    tau_hat: float
    tau_oracle: float
    re: float
    seconds: float


@dataclass(frozen=True)
class CellSummary:
    cell: Cell
    trials: int
    mean_tau_hat: float
    mean_re: float
    std_re: float


@dataclass
class SweepResult:
    spec: SweepSpec
    tau_oracle: float
    records: list[TrialRecord] = field(default_factory=list)
    summary: list[CellSummary] = field(default_factory=list)

    def records_for(self, cell_id: str) -> list[TrialRecord]:
        return [r for r in self.records if r.cell.cell_id == cell_id]

    def find(self, level, eps: float, limit_mode: str = "adaptive") -> CellSummary:
        level, mode = PrivacyLevel.parse(level), parse_limit_mode(limit_mode)
        for s in self.summary:
            if s.cell.level is level and s.cell.eps == eps and s.cell.limit_mode == mode:
                return s
        raise KeyError((level, eps, mode))


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation, summed exactly."""
    values = [float(v) for v in values]
    mu = math.fsum(values) / len(values)
    return mu, math.sqrt(math.fsum((v - mu) ** 2 for v in values) / len(values))


def summarize(cell: Cell, records: list[TrialRecord]) -> CellSummary:
    mean_re, std_re = mean_std(r.relative_error for r in records)
    mean_tau = math.fsum(r.tau_hat for r in records) / len(records)
    return CellSummary(cell=cell, trials=len(records), mean_tau_hat=mean_tau, mean_re=mean_re, std_re=std_re)


def run_sweep(data: Dataset | SynthData, spec: SweepSpec, tau_oracle: float | None = None) -> SweepResult:
    """Evaluate every cell of ``spec`` on one dataset.

    The reference effect is the non-private PSM estimate under the sweep's
    propensity settings, computed once unless ``tau_oracle`` is given.
    """
    dataset = data.dataset if isinstance(data, SynthData) else data
    if tau_oracle is None:
        tau_oracle = run_oracle_psm(dataset, spec.neighbors, lam=spec.lam, intercept=spec.intercept)
    result = SweepResult(spec=spec, tau_oracle=tau_oracle)
    for cell in spec.cells():
        records = []
        for trial in range(spec.trials):
            seed = spec.seed_base + trial
            config = cell.run_config(spec, seed)
            start = time.perf_counter()
            est = run(dataset, config)
            elapsed = time.perf_counter() - start if spec.timing else 0.0
            records.append(
                TrialRecord(
                    cell=cell,
                    trial=trial,
                    seed=seed,
                    tau_hat=est.tau_hat,
                    tau_oracle=tau_oracle,
                    relative_error=relative_error(est.tau_hat, tau_oracle),
                    wall_time=elapsed,
                    flags=est.flags,
                )
            )
        result.records.extend(records)
        result.summary.append(summarize(cell, records))
    return result


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def results_csv(rows) -> str:
    """Serialize TrialRecords or ResultRows to the results CSV text."""
    rows = [r.row() if isinstance(r, TrialRecord) else r for r in rows]
    return _write(RESULT_COLUMNS, ([getattr(r, c) for c in RESULT_COLUMNS] for r in rows))


def parse_results_csv(text: str) -> list[ResultRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != RESULT_COLUMNS:
        raise ValueError(f"unexpected results header {header}")
    out = []
    for line_no, fields in enumerate(reader, start=1):
        if len(fields) != len(RESULT_COLUMNS):
            raise ValueError(f"results row {line_no}: expected {len(RESULT_COLUMNS)} fields")
        cid, level, eps, mode, trial, tau_hat, tau_oracle, re, secs = fields
        out.append(
            ResultRow(cid, level, float(eps), mode, int(trial), float(tau_hat), float(tau_oracle), float(re), float(secs))
        )
    return out


def summary_csv(summary: list[CellSummary]) -> str:
    def rows():
        for s in summary:
            c = s.cell
            yield [
                c.cell_id,
                c.level.value,
                c.eps,
                c.limit_mode,
                c.coeff,
                c.alloc[0],
                c.alloc[1],
                s.trials,
                s.mean_tau_hat,
                s.mean_re,
                s.std_re,
            ]

    return _write(SUMMARY_COLUMNS, rows())


def with_overrides(spec: SweepSpec, **overrides) -> SweepSpec:
    """Copy of ``spec`` with the non-None overrides applied."""
    return replace(spec, **{k: v for k, v in overrides.items() if v is not None})
