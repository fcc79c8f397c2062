"""Pure-DP mechanisms and the privacy budget ledger.

Randomness comes from :class:`NoiseSource`, a seeded stream. Each pipeline
phase draws from its own stream so extra draws in one phase never shift the
draws of another.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .core import BudgetExceeded, ConfigError, NonPositiveBudget, NonPositiveSensitivity


class Stream(enum.IntEnum):
    """Stream ids, one per (phase, purpose)."""

    WEIGHTS = 1
    SCORES = 2
    TREATMENT = 3
    OUTCOMES = 4


class NoiseSource:
    """Deterministic random stream keyed by ``(seed, stream)``.

    With ``disabled=True`` every mechanism returns its input unchanged. That
    mode exists for oracle-equivalence testing only; anything produced with it
    is not private.
    """

    def __init__(self, seed: int, stream: int = 0, disabled: bool = False):
        self.seed = int(seed)
        self.stream = int(stream)
        self.disabled = bool(disabled)
        self.last_scale: float | None = None
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def uniform(self, size=None):
        """Draws from [0, 1)."""
        return self._gen.random(size)

    def __repr__(self) -> str:
        flag = ", disabled" if self.disabled else ""
        return f"NoiseSource(seed={self.seed}, stream={self.stream}{flag})"


def _check_eps(eps: float) -> float:
    eps = float(eps)
    if not eps > 0:
        raise NonPositiveBudget(f"privacy budget must be positive, got {eps}")
    return eps


def laplace_scale(sensitivity: float, eps: float) -> float:
    if not float(sensitivity) > 0:
        raise NonPositiveSensitivity(f"sensitivity must be positive, got {sensitivity}")
    return float(sensitivity) / _check_eps(eps)


def laplace_noise(scale: float, rng: NoiseSource, size=None):
    """Inverse-CDF Laplace draws, one uniform per sample."""
    u = rng.uniform(size) - 0.5
    # u == -0.5 has probability 2**-53; keep the log finite
    tail = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(float).tiny)
    return -scale * np.sign(u) * np.log(tail)


def laplace_perturb(value: float, sensitivity: float, eps: float, rng: NoiseSource) -> float:
    """Return ``value + Lap(sensitivity / eps)``."""
    scale = laplace_scale(sensitivity, eps)
    rng.last_scale = scale
    if rng.disabled:
        return float(value)
    return float(value) + float(laplace_noise(scale, rng))


def laplace_perturb_vector(values, sensitivity: float, eps: float, rng: NoiseSource) -> np.ndarray:
    """Element-wise Laplace mechanism; every coordinate uses the same scale."""
    values = np.asarray(values, dtype=float)
    scale = laplace_scale(sensitivity, eps)
    rng.last_scale = scale
    if rng.disabled or values.size == 0:
        return values.copy()
    return values + laplace_noise(scale, rng, size=values.shape)


def keep_probability(eps: float) -> float:
    """P(report the true bit) = e^eps / (e^eps + 1)."""
    eps = _check_eps(eps)
    # written as a logistic to stay finite for large eps
    return 1.0 / (1.0 + math.exp(-eps))


def randomized_response(bit: int, eps: float, rng: NoiseSource) -> int:
    p = keep_probability(eps)
    if bit not in (0, 1):
        raise ValueError(f"randomized response needs a 0/1 bit, got {bit!r}")
    if rng.disabled:
        return int(bit)
    return int(bit) if rng.uniform() < p else 1 - int(bit)


def randomized_response_vector(bits, eps: float, rng: NoiseSource) -> np.ndarray:
    """Apply randomized response independently to each bit."""
    p = keep_probability(eps)
    bits = np.asarray(bits, dtype=np.int8)
    if rng.disabled or bits.size == 0:
        return bits.copy()
    keep = rng.uniform(bits.shape) < p
    return np.where(keep, bits, 1 - bits).astype(np.int8)


class Composition(str, enum.Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"
    POST_PROCESSING = "post-processing"


@dataclass(frozen=True)
class BudgetSplit:
    eps_total: float
    eps_11: float = 0.0
    eps_12: float = 0.0
    eps_2: float = 0.0
    eps_3: float = 0.0

    def components(self) -> tuple[float, float, float, float]:
        return (self.eps_11, self.eps_12, self.eps_2, self.eps_3)

    def as_dict(self) -> dict:
        return {
            "eps_total": self.eps_total,
            "eps_11": self.eps_11,
            "eps_12": self.eps_12,
            "eps_2": self.eps_2,
            "eps_3": self.eps_3,
        }


@dataclass(frozen=True)
class LedgerEntry:
    phase: str
    eps: float
    kind: Composition


@dataclass
class BudgetLedger:
    """Records privacy spend per phase.

    Sequential entries add up. Parallel entries within one phase act on
    disjoint parts of the data, so the phase is charged their maximum.
    Post-processing is always free.
    """

    eps_total: float
    entries: list[LedgerEntry] = field(default_factory=list)
    tainted: bool = False

    # relative slack for float round-off when checking the cap
    _SLACK = 1e-12

    @staticmethod
    def _total_of(entries) -> float:
        seq = [e.eps for e in entries if e.kind is Composition.SEQUENTIAL]
        par: dict[str, float] = {}
        for e in entries:
            if e.kind is Composition.PARALLEL:
                par[e.phase] = max(par.get(e.phase, 0.0), e.eps)
        return math.fsum(seq + list(par.values()))

    @property
    def total(self) -> float:
        return self._total_of(self.entries)

    def record(self, phase: str, eps: float, kind: Composition | str) -> "BudgetLedger":
        kind = Composition(kind)
        eps = 0.0 if kind is Composition.POST_PROCESSING else float(eps)
        if eps < 0 or not math.isfinite(eps):
            raise ConfigError(f"cannot record eps={eps} for phase {phase!r}")
        if "," in phase or "\n" in phase:
            raise ConfigError(f"phase label {phase!r} may not contain commas or newlines")
        entry = LedgerEntry(phase, eps, kind)
        new_total = self._total_of([*self.entries, entry])
        if new_total > self.eps_total * (1 + self._SLACK):
            raise BudgetExceeded(
                f"recording {eps} for {phase!r} would spend {new_total} > eps_total={self.eps_total}"
            )
        self.entries.append(entry)
        return self

    def phase_total(self, phase: str) -> float:
        return self._total_of([e for e in self.entries if e.phase == phase])

    def sequential_entries(self) -> list[LedgerEntry]:
        return [e for e in self.entries if e.kind is Composition.SEQUENTIAL]

    def budget_bearing_phases(self) -> list[str]:
        phases: list[str] = []
        for e in self.entries:
            if e.eps > 0 and e.phase not in phases:
                phases.append(e.phase)
        return phases

    def to_audit_log(self) -> str:
        """One ``phase,kind,eps`` line per entry."""
        return "".join(f"{e.phase},{e.kind.value},{e.eps!r}\n" for e in self.entries)

    @classmethod
    def from_audit_log(cls, text: str, eps_total: float) -> "BudgetLedger":
        ledger = cls(eps_total=eps_total)
        for line in text.splitlines():
            if not line.strip():
                continue
            phase, kind, eps = line.split(",")
            ledger.record(phase, float(eps), kind)
        return ledger

    def as_dict(self) -> dict:
        return {
            "eps_total": self.eps_total,
            "total": self.total,
            "tainted": self.tainted,
            "entries": [{"phase": e.phase, "kind": e.kind.value, "eps": e.eps} for e in self.entries],
        }


def ledger_record(ledger: BudgetLedger, phase: str, eps: float, kind: Composition | str) -> BudgetLedger:
    return ledger.record(phase, eps, kind)
