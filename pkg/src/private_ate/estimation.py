"""Phase 3: adaptive matching limits, capped counterfactuals and the noisy ATE.

Terminology used throughout:

* a *query* is a sample whose counterfactual is being estimated;
* its *candidates* are the opposite-group samples in its sorted row;
* ``k_treated`` / ``k_control`` cap how often a treated / control sample may
  serve as a neighbor, in units of ``N`` selections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, DegenerateGroups, GroupCounts, PrivacyLevel
from .dp_primitives import (
    BudgetLedger,
    BudgetSplit,
    Composition,
    NoiseSource,
    laplace_perturb,
)
from .matching import SortedMatrices, TreatmentView

DEFAULT_NEIGHBORS = 5
DEFAULT_C = 0.01
DEFAULT_H = 0.001


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class MatchConfig:
    """Matching knobs.

    ``error_coeff`` is c at label level and h at sample level; ``None`` picks
    the level default. ``fixed_k`` switches from adaptive limits to k1 = k2 =
    fixed_k. ``capped=False`` disables caps entirely (oracle runs only).
    ``feasible`` raises the limits, when needed, to the smallest values at
    which no query can run out of uncapped candidates.
    """

    neighbors: int = DEFAULT_NEIGHBORS
    error_coeff: float | None = None
    fixed_k: int | None = None
    capped: bool = True
    feasible: bool = True
    per_group_m: bool = False

    def __post_init__(self):
        if self.neighbors < 1:
            raise ValueError(f"neighbors must be >= 1, got {self.neighbors}")
        if self.error_coeff is not None and not self.error_coeff > 0:
            raise ValueError(f"error coefficient must be positive, got {self.error_coeff}")
        if self.fixed_k is not None and self.fixed_k < 1:
            raise ValueError(f"fixed matching limit must be >= 1, got {self.fixed_k}")

    @property
    def limit_mode(self) -> str:
        return "adaptive" if self.fixed_k is None else f"fixed:{self.fixed_k}"

    def coeff_for(self, level: PrivacyLevel) -> float:
        if self.error_coeff is not None:
            return self.error_coeff
        return DEFAULT_C if level is PrivacyLevel.LABEL else DEFAULT_H


@dataclass(frozen=True)
class MatchPlan:
    k_treated: int
    k_control: int
    k_star: float
    k_f: int
    m_max: int
    m1: float
    r1: float
    n1: int
    neighbors: int
    # effective neighbor count when the candidate group is smaller than N
    neighbors_treated: int
    neighbors_control: int
    capped: bool = True
    floor_applied: bool = False
    paired: tuple[int, int] = (0, 0)

    @property
    def cap_treated(self) -> float:
        return self.k_treated * self.neighbors_treated if self.capped else math.inf

    @property
    def cap_control(self) -> float:
        return self.k_control * self.neighbors_control if self.capped else math.inf

    def as_dict(self) -> dict:
        return {
            "k1": self.k_treated,
            "k2": self.k_control,
            "k_star": self.k_star,
            "k_f": self.k_f,
            "M": self.m_max,
            "M1": self.m1,
            "r1": self.r1,
            "n1": self.n1,
            "N": self.neighbors,
            "capped": self.capped,
            "floor_applied": self.floor_applied,
        }


@dataclass(frozen=True)
class Counterfactuals:
    y1: np.ndarray
    y0: np.ndarray
    selections: np.ndarray
    load: np.ndarray
    neighbors: list
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class AggregatedOutcomes:
    s1: float
    s0: float
    s1_hat: float
    s0_hat: float
    sens1: float
    sens0: float


@dataclass
class AteResult:
    tau_hat: float
    n: int
    agg: AggregatedOutcomes | None = None
    budgets: BudgetSplit | None = None
    plan: MatchPlan | None = None
    level: PrivacyLevel | None = None
    seed: int | None = None
    tainted: bool = False
    flags: tuple[str, ...] = ()
    ledger: BudgetLedger | None = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        plan = self.plan
        return {
            "tau_hat": self.tau_hat,
            "eps": self.budgets.eps_total if self.budgets else None,
            "level": self.level.value if self.level else None,
            "k1": plan.k_treated if plan else None,
            "k2": plan.k_control if plan else None,
            "k_star": plan.k_star if plan else None,
            "M": plan.m_max if plan else None,
            "M1": plan.m1 if plan else None,
            "seed": self.seed,
            "flags": list(self.flags) + (["tainted"] if self.tainted else []),
        }


def _effective_neighbors(N: int, matrices: SortedMatrices) -> tuple[int, int]:
    """Neighbors actually drawn from the treated / control candidate pools."""
    return min(N, matrices.treated_idx.size), min(N, matrices.control_idx.size)


def appearance_counts(matrices: SortedMatrices, neighbors: int) -> np.ndarray:
    """How often each sample appears in the first ``neighbors`` columns."""
    counts = np.bincount(matrices.h0[:, :neighbors].ravel(), minlength=matrices.n)
    counts += np.bincount(matrices.h1[:, :neighbors].ravel(), minlength=matrices.n)
    return counts


def count_max_matches(matrices: SortedMatrices, neighbors: int) -> tuple[int, float]:
    """Return ``(M, M / N)`` with M the largest appearance count."""
    M = int(appearance_counts(matrices, neighbors).max())
    return M, M / neighbors


def combined_error(k: float, eps: float, c: float, B: float, n1: float, m1: float) -> float:
    """Approximate squared error of a noisy capped sum as a function of k."""
    return 2 * k**2 * B**2 / eps**2 + c**2 * B**2 * n1**2 * m1**2 / k**2


def matching_limit_label(eps: float, c: float, n1: int, m1: float) -> tuple[float, int]:
    k_star = math.sqrt(eps * c * n1 * m1 / 2.0)
    k_f = min(max(round_half_away(k_star), 1), math.ceil(m1))
    return k_star, k_f


def matching_limit_sample(eps_3: float, h: float, n1: int, m1: float) -> tuple[float, int]:
    k_star = math.sqrt(eps_3 * h * n1 * m1 / 2.0)
    return k_star, max(round_half_away(k_star), 1)


def pair_limits(k_f: int, counts: GroupCounts) -> tuple[int, int]:
    """Derive ``(k1, k2)`` from k_f and the group ratio r1 = n_t / n_c."""
    if counts.n_t < 1 or counts.n_c < 1:
        raise DegenerateGroups(f"both groups need samples (n_t={counts.n_t}, n_c={counts.n_c})")
    r1 = counts.n_t / counts.n_c
    if r1 <= 1:
        k1 = k_f
        k2 = max(1, round_half_away(k1 * r1))
    else:
        k2 = k_f
        k1 = max(1, round_half_away(k2 / r1))
    return k1, k2


def feasibility_floor(n_queries: int, n_candidates: int, neighbors: int) -> int:
    """Smallest k for which greedy capped matching never runs short.

    With cap k*N per candidate, after q - 1 queries at most (q - 1) / k
    candidates are capped, so N uncapped ones remain whenever
    k >= (n_queries - 1) / (n_candidates - N). If the pool is no larger than
    N, every query takes the whole pool and k*N must cover all queries.
    """
    if n_queries <= 1:
        return 1
    if n_candidates > neighbors:
        return max(1, math.ceil((n_queries - 1) / (n_candidates - neighbors)))
    return max(1, math.ceil(n_queries / neighbors))


def plan_limits(
    matrices: SortedMatrices,
    counts: GroupCounts,
    config: MatchConfig,
    level: PrivacyLevel,
    eps: float,
) -> MatchPlan:
    """Compute matching limits from the (perturbed, at sample level) matrices.

    ``eps`` is the budget of the noisy sums: epsilon at label level, eps_3 at
    sample level. Only counts and sorted indices are used, so this is
    post-processing.
    """
    N = config.neighbors
    n_tr, n_co = _effective_neighbors(N, matrices)
    appearances = appearance_counts(matrices, N)
    r1 = counts.n_t / counts.n_c
    if config.per_group_m:
        pool = matrices.treated_idx if r1 <= 1 else matrices.control_idx
        M = int(appearances[pool].max())
    else:
        M = int(appearances.max())
    m1 = M / N
    n1 = counts.n1

    if config.fixed_k is not None:
        k_star, k_f = float(config.fixed_k), config.fixed_k
        k1 = k2 = config.fixed_k
    else:
        c = config.coeff_for(level)
        if level is PrivacyLevel.LABEL:
            k_star, k_f = matching_limit_label(eps, c, n1, m1)
        else:
            k_star, k_f = matching_limit_sample(eps, c, n1, m1)
        k1, k2 = pair_limits(k_f, counts)

    paired = (k1, k2)
    floor_applied = False
    if config.capped and config.feasible:
        f1 = feasibility_floor(counts.n_c, counts.n_t, n_tr)
        f2 = feasibility_floor(counts.n_t, counts.n_c, n_co)
        if k1 < f1 or k2 < f2:
            floor_applied = True
            k1, k2 = max(k1, f1), max(k2, f2)

    return MatchPlan(
        k_treated=k1,
        k_control=k2,
        k_star=k_star,
        k_f=k_f,
        m_max=M,
        m1=m1,
        r1=r1,
        n1=n1,
        neighbors=N,
        neighbors_treated=n_tr,
        neighbors_control=n_co,
        capped=config.capped,
        floor_applied=floor_applied,
        paired=paired,
    )


def capped_counterfactuals(
    dataset: Dataset,
    matrices: SortedMatrices,
    treatment: TreatmentView,
    plan: MatchPlan,
) -> Counterfactuals:
    """Estimate both potential outcomes for every sample under matching caps.

    Samples are visited in ascending index order. Each takes the nearest
    candidates that have not reached their group's cap and increments their
    counters. If fewer than the required number remain uncapped, the remaining
    ones are used (flag ``short``); if none remain, the nearest ones are taken
    regardless of caps (flag ``exhausted``). Both flags mean the (k + 1) * B
    sensitivity no longer holds for that run.
    """
    n = dataset.n
    bits = np.asarray(treatment.bits)
    y = dataset.outcomes
    cap = np.where(bits == 1, plan.cap_treated, plan.cap_control).astype(float)
    need = np.where(bits == 1, plan.neighbors_control, plan.neighbors_treated)

    row_pos = np.empty(n, dtype=np.int64)
    row_pos[matrices.control_idx] = np.arange(matrices.control_idx.size)
    row_pos[matrices.treated_idx] = np.arange(matrices.treated_idx.size)

    selections = np.zeros(n, dtype=np.int64)
    load = np.zeros(n)
    cf = np.empty(n)
    chosen_all = []
    flags: set[str] = set()

    for i in range(n):
        row = matrices.h1[row_pos[i]] if bits[i] == 1 else matrices.h0[row_pos[i]]
        k = int(need[i])
        head = row[:k]
        if np.all(selections[head] < cap[head]):
            chosen = head
        else:
            window = 2 * k
            while True:
                part = row[:window]
                free = part[selections[part] < cap[part]]
                if free.size >= k or window >= row.size:
                    break
                window *= 2
            chosen = free[:k]
            if chosen.size == 0:
                flags.add("exhausted")
                chosen = head
            elif chosen.size < k:
                flags.add("short")
        selections[chosen] += 1
        load[chosen] += 1.0 / chosen.size
        cf[i] = y[chosen].mean()
        chosen_all.append(chosen)

    y1 = np.where(bits == 1, y, cf)
    y0 = np.where(bits == 0, y, cf)
    return Counterfactuals(
        y1=y1, y0=y0, selections=selections, load=load, neighbors=chosen_all, flags=tuple(sorted(flags))
    )


def aggregate_and_perturb(
    y1,
    y0,
    B: float,
    k1: int,
    k2: int,
    eps_3: float,
    rng: NoiseSource,
    ledger: BudgetLedger | None = None,
) -> AggregatedOutcomes:
    """Sum both potential-outcome vectors and add Laplace noise.

    The two sums are charged ``eps_3`` once: a sample's outcome feeds only
    the sum of its own group.
    """
    s1 = math.fsum(np.asarray(y1, dtype=float))
    s0 = math.fsum(np.asarray(y0, dtype=float))
    sens1 = (k1 + 1) * float(B)
    sens0 = (k2 + 1) * float(B)
    if rng.disabled and not eps_3 > 0:
        s1_hat, s0_hat = s1, s0
    else:
        s1_hat = laplace_perturb(s1, sens1, eps_3, rng)
        s0_hat = laplace_perturb(s0, sens0, eps_3, rng)
    if ledger is not None:
        if eps_3 > 0:
            ledger.record("phase3", eps_3, Composition.SEQUENTIAL)
        ledger.tainted |= rng.disabled
    return AggregatedOutcomes(s1=s1, s0=s0, s1_hat=s1_hat, s0_hat=s0_hat, sens1=sens1, sens0=sens0)


def ate_from_sums(agg: AggregatedOutcomes, n: int, **provenance) -> AteResult:
    if n < 1:
        raise ValueError("n must be >= 1")
    tau_hat = (agg.s1_hat - agg.s0_hat) / n
    return AteResult(tau_hat=tau_hat, n=n, agg=agg, **provenance)


def replacement_counts(matrices: SortedMatrices, neighbors: int, k_treated: int, k_control: int) -> tuple[int, int]:
    """Replacements forced by the caps, ``(R_treated, R_control)``.

    R sums max(0, u_j - k * N) over candidates j, where u_j counts how often j
    is among the nearest neighbors when no cap is applied.
    """
    n_tr, n_co = _effective_neighbors(neighbors, matrices)
    u_t = np.bincount(matrices.h0[:, :n_tr].ravel(), minlength=matrices.n)[matrices.treated_idx]
    u_c = np.bincount(matrices.h1[:, :n_co].ravel(), minlength=matrices.n)[matrices.control_idx]
    r_t = int(np.maximum(0, u_t - k_treated * n_tr).sum())
    r_c = int(np.maximum(0, u_c - k_control * n_co).sum())
    return r_t, r_c


def error_bound_label(
    dataset: Dataset,
    matrices: SortedMatrices,
    neighbors: int,
    k: int | tuple[int, int],
    B: float,
    eps: float,
) -> tuple[float, int]:
    """Label-level error bound 2((k+1)B/eps)^2 + (R*B/N)^2 and its R.

    ``k`` may be a single limit or a ``(k_treated, k_control)`` pair; with a
    pair the variance term uses the larger one. Diagnostic only.
    """
    k1, k2 = (k, k) if isinstance(k, (int, np.integer)) else k
    R = sum(replacement_counts(matrices, neighbors, k1, k2))
    k_var = max(k1, k2)
    bound = 2 * ((k_var + 1) * B / eps) ** 2 + (R * B / neighbors) ** 2
    return bound, R
