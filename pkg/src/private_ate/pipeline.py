"""End-to-end private ATE estimation for both privacy levels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, Dataset, DegenerateGroups, InvalidRatios, LedgerViolation, NonPositiveBudget, PrivacyLevel
from .dp_primitives import BudgetLedger, BudgetSplit, Composition, NoiseSource, Stream
from .estimation import (
    AteResult,
    MatchConfig,
    aggregate_and_perturb,
    ate_from_sums,
    capped_counterfactuals,
    plan_limits,
)
from .matching import build_sorted_matrices, perturb_treatment
from .propensity import DEFAULT_LAMBDA, privatize_scores, privatize_weights, score, train

DEFAULT_RATIOS = (0.1, 0.7, 0.2)


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs besides the data.

    ``ratios`` split epsilon across phases 1-3 at sample level; phase 1 is
    further split ``phase1_split : 1 - phase1_split`` between the weights and
    the scores.
    """

    level: PrivacyLevel = PrivacyLevel.LABEL
    eps_total: float = 1.0
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    phase1_split: float = 0.5
    match: MatchConfig = field(default_factory=MatchConfig)
    lam: float = DEFAULT_LAMBDA
    intercept: bool = False
    seed: int = 0
    oracle_mode: bool = False

    def __post_init__(self):
        object.__setattr__(self, "level", PrivacyLevel.parse(self.level))
        if not self.oracle_mode and not self.eps_total > 0:
            raise NonPositiveBudget(f"eps must be positive, got {self.eps_total}")
        if not self.match.capped and not self.oracle_mode:
            raise ConfigError("uncapped matching voids the sensitivity bound; it is allowed only in oracle mode")


def split_budget(config: RunConfig) -> BudgetSplit:
    eps = float(config.eps_total)
    if config.level is PrivacyLevel.LABEL:
        return BudgetSplit(eps_total=eps, eps_3=eps)
    r1, r2, r3 = (float(r) for r in config.ratios)
    if min(r1, r2, r3) < 0 or not math.isclose(r1 + r2 + r3, 1.0, rel_tol=0, abs_tol=1e-9):
        raise InvalidRatios(f"phase ratios must be non-negative and sum to 1, got {config.ratios}")
    if not 0 <= config.phase1_split <= 1:
        raise InvalidRatios(f"phase-1 split must lie in [0, 1], got {config.phase1_split}")
    # snap the first three shares to multiples of ulp(eps); eps minus their sum
    # is then exact and the four parts add up to eps with no round-off
    q = math.ulp(eps)

    def snap(x: float) -> float:
        return round(x / q) * q

    eps_1 = r1 * eps
    eps_11 = snap(config.phase1_split * eps_1)
    eps_12 = snap(eps_1 - eps_11)
    eps_2 = snap(r2 * eps)
    eps_3 = max(eps - math.fsum([eps_11, eps_12, eps_2]), 0.0)
    return BudgetSplit(eps_total=eps, eps_11=eps_11, eps_12=eps_12, eps_2=eps_2, eps_3=eps_3)


def _check_ledger(ledger: BudgetLedger, budgets: BudgetSplit, level: PrivacyLevel) -> None:
    if ledger.tainted:
        return
    if not math.isclose(ledger.total, budgets.eps_total, rel_tol=1e-12, abs_tol=0.0):
        raise LedgerViolation(f"ledger total {ledger.total!r} != eps {budgets.eps_total!r}")
    if level is PrivacyLevel.LABEL and len(ledger.sequential_entries()) != 1:
        raise LedgerViolation("label-level run must hold exactly one sequential entry")


def run(dataset: Dataset, config: RunConfig) -> AteResult:
    """Run all three phases and return the estimate with its provenance.

    The returned result carries the budget ledger; for a non-oracle run its
    total equals ``config.eps_total``.
    """
    level = config.level
    budgets = split_budget(config)
    ledger = BudgetLedger(eps_total=budgets.eps_total, tainted=config.oracle_mode)

    def stream(s: Stream) -> NoiseSource:
        return NoiseSource(config.seed, int(s), disabled=config.oracle_mode)

    # phase 1
    model = train(dataset, lam=config.lam, intercept=config.intercept)
    if level is PrivacyLevel.SAMPLE:
        model = privatize_weights(model, dataset.n, budgets.eps_11, stream(Stream.WEIGHTS), ledger)
    scores = score(model, dataset)
    if level is PrivacyLevel.SAMPLE:
        scores = privatize_scores(scores, budgets.eps_12, stream(Stream.SCORES), ledger)

    # phase 2
    view = perturb_treatment(dataset, level, budgets.eps_2, stream(Stream.TREATMENT), ledger)
    if view.counts.n_t == 0 or view.counts.n_c == 0:
        raise DegenerateGroups("treatment perturbation left one group empty")
    matrices = build_sorted_matrices(scores, view)
    ledger.record("phase2-sort", 0.0, Composition.POST_PROCESSING)

    # phase 3
    plan = plan_limits(matrices, view.counts, config.match, level, budgets.eps_3)
    ledger.record("phase3-limits", 0.0, Composition.POST_PROCESSING)
    cf = capped_counterfactuals(dataset, matrices, view, plan)
    agg = aggregate_and_perturb(
        cf.y1,
        cf.y0,
        dataset.outcome_range,
        plan.k_treated,
        plan.k_control,
        budgets.eps_3,
        stream(Stream.OUTCOMES),
        ledger,
    )
    result = ate_from_sums(
        agg,
        dataset.n,
        budgets=budgets,
        plan=plan,
        level=level,
        seed=config.seed,
        tainted=ledger.tainted,
        flags=cf.flags + (("limit-floor",) if plan.floor_applied else ()),
        ledger=ledger,
    )
    ledger.record("phase3-ate", 0.0, Composition.POST_PROCESSING)
    _check_ledger(ledger, budgets, level)
    return result


def run_oracle_psm(
    dataset: Dataset,
    neighbors: int = 5,
    lam: float | None = DEFAULT_LAMBDA,
    intercept: bool = False,
) -> float:
    """Non-private PSM estimate: exact scores, uncapped nearest-neighbor means.

    Deliberately written without the sorted-matrix and capped-matching code so
    it can serve as an independent reference. The propensity model defaults
    match :class:`RunConfig`; ``lam=None`` means 1/n, the weak penalty of a
    conventional (unregularized-in-spirit) PSM fit.
    """
    t = np.asarray(dataset.treatment)
    if t.min() == t.max():
        raise DegenerateGroups("both treatment groups must be non-empty")
    lam = 1.0 / dataset.n if lam is None else lam
    e = score(train(dataset, lam=lam, intercept=intercept), dataset).scores
    y = dataset.outcomes
    idx = np.arange(dataset.n)
    y1 = y.astype(float).copy()
    y0 = y.astype(float).copy()
    for arm, out in ((1, y0), (0, y1)):
        query, pool = idx[t == arm], idx[t != arm]
        dist = np.abs(e[query][:, None] - e[pool][None, :])
        ties = np.broadcast_to(pool, dist.shape)
        nearest = pool[np.lexsort((ties, dist), axis=1)[:, :neighbors]]
        out[query] = y[nearest].mean(axis=1)
    return (math.fsum(y1) - math.fsum(y0)) / dataset.n
