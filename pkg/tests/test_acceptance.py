"""Acceptance suite: one test per criterion, each tagged with a ``criterion`` label.

The terminal summary prints a PASS/FAIL line per label (see conftest.py).
"""

import gc
import math
import time

import numpy as np
import pytest

import oracles
from conftest import random_dataset
from private_ate.cli import main
from private_ate.core import Dataset, GroupCounts, PrivacyLevel
from private_ate.data_io import SynthParams, generate_synth
from private_ate.dp_primitives import BudgetLedger, NoiseSource, keep_probability, laplace_noise, randomized_response_vector
from private_ate.estimation import (
    MatchConfig,
    capped_counterfactuals,
    combined_error,
    matching_limit_label,
    matching_limit_sample,
    pair_limits,
    plan_limits,
    replacement_counts,
)
from private_ate.harness import SweepSpec, run_sweep
from private_ate.matching import build_sorted_matrices, perturb_treatment
from private_ate.pipeline import RunConfig, run, run_oracle_psm
from private_ate.propensity import LogisticModel, design_matrix, gradient, score, train


def criterion(label):
    def tag(fn):
        fn.criterion = label
        return fn

    return tag


def _random_mixed_dataset(r, n_max=50, d_max=5, min_group=1):
    while True:
        ds = random_dataset(r, int(r.integers(2, n_max + 1)), int(r.integers(1, d_max + 1)), B=float(r.uniform(0.5, 5)))
        if min(ds.counts.n_t, ds.counts.n_c) >= min_group:
            return ds


def _label_setup(ds):
    view = perturb_treatment(ds, PrivacyLevel.LABEL, None, None)
    return view, build_sorted_matrices(score(train(ds), ds), view)


@criterion("criterion 1: oracle equivalence")
def test_oracle_equivalence():
    r = np.random.default_rng(1)
    start = time.perf_counter()
    for _ in range(200):
        ds = _random_mixed_dataset(r)
        N = int(r.integers(1, 6))
        cfg = RunConfig(level="label", eps_total=1.0, match=MatchConfig(neighbors=N, capped=False), oracle_mode=True)
        res = run(ds, cfg)
        e = score(train(ds), ds).scores
        brute = oracles.psm_tau(e.tolist(), ds.treatment.tolist(), ds.outcomes.tolist(), N)
        assert abs(res.tau_hat - brute) <= 1e-9
        assert abs(run_oracle_psm(ds, N) - brute) <= 1e-9
        assert res.tainted
    assert time.perf_counter() - start < 10.0


@criterion("criterion 2: privacy accounting")
def test_ledger_exactness():
    r = np.random.default_rng(2)
    for i in range(60):
        ds = _random_mixed_dataset(r, n_max=60)
        eps = float(r.choice([0.1, 0.5, 1.0, 2.0, 3.7, 8.0, r.uniform(0.05, 10)]))
        level = "label" if i % 2 else "sample"
        a, b = r.uniform(0.01, 0.5), r.uniform(0.01, 0.45)
        cfg = RunConfig(level=level, eps_total=eps, ratios=(a, b, 1 - a - b), seed=i)
        res = run(ds, cfg)
        led = res.ledger
        assert led.total == eps
        assert not led.tainted
        if level == "label":
            seq = led.sequential_entries()
            assert len(seq) == 1 and seq[0].eps == eps
            assert led.budget_bearing_phases() == ["phase3"]
        else:
            parts = [led.phase_total(p) for p in ("phase1a", "phase1b", "phase2", "phase3")]
            assert parts == list(res.budgets.components())
            assert math.fsum(parts) == eps
        assert BudgetLedger.from_audit_log(led.to_audit_log(), eps).total == eps


@criterion("criterion 3: mechanism statistics")
def test_mechanism_statistics():
    start = time.perf_counter()
    beta = 2.5
    draws = laplace_noise(beta, NoiseSource(3, 4), 1_000_000)
    assert abs(draws.var() / (2 * beta**2) - 1) < 0.05
    n = 1_000_000
    bits = np.arange(n) % 2
    for k, eps in enumerate((0.5, 1.0, 2.0)):
        out = randomized_response_vector(bits, eps, NoiseSource(30 + k, 3))
        p = math.exp(eps) / (math.exp(eps) + 1)
        assert keep_probability(eps) == pytest.approx(p, rel=1e-15)
        keep = np.mean(out == bits)
        assert abs(keep - p) <= 3 * math.sqrt(p * (1 - p) / n)
    assert time.perf_counter() - start < 5.0


def _check_contributions(r):
    ds = _random_mixed_dataset(r, n_max=40, d_max=3)
    view, m = _label_setup(ds)
    cfg = MatchConfig(neighbors=int(r.integers(1, 5)), error_coeff=float(r.uniform(0.001, 0.5)))
    plan = plan_limits(m, view.counts, cfg, PrivacyLevel.LABEL, float(r.uniform(0.1, 4)))
    cf = capped_counterfactuals(ds, m, view, plan)
    assert cf.flags == ()
    B = ds.outcome_range
    k = np.where(ds.treatment == 1, plan.k_treated, plan.k_control)
    # each sample enters its own group's sum once plus 1/N per selection
    assert np.all(1.0 + cf.load <= k + 1 + 1e-12)
    # witness: move one outcome across the whole range and watch the sum
    j = int(r.integers(ds.n))
    y = ds.outcomes.copy()
    lo = y.min()
    y[j] = lo + B if y[j] - lo < B / 2 else lo
    moved = Dataset.from_arrays(ds.treatment, ds.covariates, y, 2 * B)
    cf2 = capped_counterfactuals(moved, m, view, plan)
    own = (cf.y1, cf2.y1) if ds.treatment[j] == 1 else (cf.y0, cf2.y0)
    delta = abs(math.fsum(own[1]) - math.fsum(own[0]))
    assert delta <= (k[j] + 1) * abs(y[j] - ds.outcomes[j]) + 1e-9
    assert delta == pytest.approx((1 + cf.load[j]) * abs(y[j] - ds.outcomes[j]), rel=1e-9, abs=1e-12)


@criterion("criterion 4: sensitivity witnesses")
def test_sensitivity_witnesses():
    start = time.perf_counter()
    r = np.random.default_rng(4)
    for _ in range(500):
        _check_contributions(r)
    worst = 0.0
    for _ in range(500):
        n, d = int(r.integers(4, 31)), int(r.integers(1, 5))
        lam = float(r.uniform(0.2, 2.0))
        ds = random_dataset(r, n, d)
        w = train(ds, lam=lam).weights
        # only drop from an arm that stays non-empty
        sizes = np.bincount(ds.treatment, minlength=2)
        drop = int(r.choice(np.flatnonzero(sizes[ds.treatment] > 1)))
        keep = np.arange(n) != drop
        rest = Dataset.from_arrays(ds.treatment[keep], ds.covariates[keep], ds.outcomes[keep], ds.outcome_range)
        w2 = train(rest, lam=lam).weights
        gap = float(np.abs(w - w2).sum())
        bound = 2 * d / (n * lam)
        assert gap <= bound + 1e-6
        worst = max(worst, gap / bound)
    assert worst > 0
    assert time.perf_counter() - start < 60.0


@criterion("criterion 5: gradient correctness")
def test_gradient_against_finite_differences():
    r = np.random.default_rng(5)
    for _ in range(100):
        ds = random_dataset(r, int(r.integers(3, 40)), int(r.integers(1, 6)))
        lam = float(r.uniform(0.01, 3))
        w = r.normal(scale=1.0, size=ds.d)
        probe = LogisticModel(weights=w, lam=lam)
        X = design_matrix(ds).tolist()
        T = ds.treatment.tolist()
        numeric = oracles.central_difference(lambda v: oracles.logistic_loss(v, X, T, lam), w)
        analytic = gradient(probe, ds)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert rel < 1e-5


@criterion("criterion 6: closed-form limit minimizes the combined error (grid search)")
def test_limit_grid_optimality():
    # Expected to fail: the closed form sits 2^(-1/4) below the objective's
    # stationary point, about 6% above the minimum value.
    r = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        eps, c, B = r.uniform(0.1, 8), r.uniform(1e-3, 0.2), r.uniform(0.5, 5)
        n1, m1 = int(r.integers(10, 5000)), r.uniform(1, 30)
        k_star = matching_limit_label(eps, c, n1, m1)[0]
        f = lambda k: combined_error(k, eps, c, B, n1, m1)  # noqa: E731
        _, f_grid = oracles.grid_argmin(f, k_star / 3, 3 * k_star, 20001)
        worst = max(worst, f(k_star) / f_grid - 1)
    assert worst <= 1e-9, f"closed-form k* exceeds the grid minimum by {worst:.3%}"


@criterion("criterion 6: clamping examples")
def test_limit_clamping_examples():
    k_star, k_f = matching_limit_label(1.5, 0.01, 608, 10)
    assert k_star == pytest.approx(math.sqrt(45.6), rel=1e-15) and k_f == 7
    assert pair_limits(k_f, GroupCounts(139, 608)) == (7, 2)
    assert matching_limit_label(1e-4, 0.01, 100, 3)[1] == 1
    assert matching_limit_label(1e6, 0.01, 1000, 2.2)[1] == 3
    k_star, k_f = matching_limit_sample(0.4, 0.001, 511, 6)
    assert k_star == pytest.approx(math.sqrt(0.6132), rel=1e-15) and k_f == 1
    assert matching_limit_sample(2.5, 1.0, 5, 1.0) == (2.5, 3)
    assert matching_limit_sample(1e9, 1.0, 10**6, 10)[1] > 10


@criterion("criterion 7: Synth reproduction")
def test_synth_reproduction():
    start = time.perf_counter()
    taus = []
    for seed in range(100):
        ds = generate_synth(SynthParams(seed=seed)).dataset
        assert abs(ds.counts.n_c - 489) <= 60 and abs(ds.counts.n_t - 511) <= 60
        tau = run_oracle_psm(ds, 5, lam=None, intercept=True)
        assert abs(tau - 0.5) <= 0.1, (seed, tau)
        taus.append(tau)
    assert abs(math.fsum(taus) / len(taus) - 0.5) <= 0.05
    assert time.perf_counter() - start < 30.0


@criterion("criterion 8: trend reproduction")
def test_trend_reproduction():
    start = time.perf_counter()
    synth = generate_synth(SynthParams(seed=0))
    res = run_sweep(synth, SweepSpec(eps_grid=(0.5, 2.0, 4.0), trials=10))
    label = {e: res.find("label", e, "adaptive").mean_re for e in (0.5, 2.0, 4.0)}
    sample = res.find("sample", 0.5, "adaptive").mean_re
    assert label[4.0] <= label[0.5]
    assert label[0.5] <= sample
    assert label[2.0] < 0.5
    assert time.perf_counter() - start < 120.0


@criterion("criterion 9: replacement bias term")
def test_replacement_bias_term():
    r = np.random.default_rng(9)
    for _ in range(200):
        N = int(r.integers(1, 5))
        ds = _random_mixed_dataset(r, n_max=40, d_max=3, min_group=N)
        view, m = _label_setup(ds)
        eps = float(r.uniform(0.1, 4))
        cfg = MatchConfig(neighbors=N, error_coeff=float(r.uniform(0.001, 0.5)), feasible=bool(r.integers(2)))
        capped = plan_limits(m, view.counts, cfg, PrivacyLevel.LABEL, eps)
        free = plan_limits(m, view.counts, MatchConfig(neighbors=N, capped=False), PrivacyLevel.LABEL, eps)
        a = capped_counterfactuals(ds, m, view, capped)
        b = capped_counterfactuals(ds, m, view, free)
        d1 = math.fsum(a.y1) - math.fsum(b.y1)
        d0 = math.fsum(a.y0) - math.fsum(b.y0)
        R = sum(replacement_counts(m, N, capped.k_treated, capped.k_control))
        bound = (R * ds.outcome_range / N) ** 2
        assert max(d1**2, d0**2, (d1 - d0) ** 2) <= bound * (1 + 1e-12) + 1e-18


@criterion("criterion 10: CLI determinism")
def test_cli_determinism(tmp_path):
    data = tmp_path / "synth.csv"
    spec = tmp_path / "sweep.txt"
    spec.write_text("eps_grid=0.5,2\ntrials=2\n")

    def twice(make):
        outs = []
        for tag in ("a", "b"):
            argv, files = make(tmp_path / tag)
            (tmp_path / tag).mkdir(exist_ok=True)
            assert main(argv) == 0
            outs.append([f.read_bytes() for f in files])
        assert outs[0] == outs[1]

    def synth(d):
        out = d / "s.csv"
        return ["synth", "--n", "200", "--d", "5", "--seed", "4", "--out", str(out)], [out, d / "s.json"]

    twice(synth)
    assert main(["synth", "--n", "200", "--d", "5", "--seed", "4", "--out", str(data)]) == 0
    common = ["--input", str(data), "--b-range", "10"]
    for level in ("label", "sample"):
        twice(lambda d: (["estimate", *common, "--level", level, "--eps", "1", "--seed", "7", "--output", str(d / "e.json")], [d / "e.json"]))
    twice(lambda d: (["oracle", *common, "--output", str(d / "o.json")], [d / "o.json"]))
    twice(lambda d: (["bound", *common, "--eps", "1", "--output", str(d / "b.json")], [d / "b.json"]))
    twice(
        lambda d: (
            ["bench", *common, "--spec", str(spec), "--results", str(d / "r.csv"), "--summary", str(d / "s.csv")],
            [d / "r.csv", d / "s.csv"],
        )
    )


def _interleaved_min_times(jobs, rounds):
    """Best CPU time per job, cycling through all jobs each round.

    CPU time ignores time spent descheduled, and interleaving spreads any
    remaining machine noise across all sizes instead of one. The collector is
    paused while timing, as timeit does.
    """
    best = [math.inf] * len(jobs)
    gc.disable()
    try:
        for _ in range(rounds):
            for i, job in enumerate(jobs):
                t0 = time.process_time()
                job()
                best[i] = min(best[i], time.process_time() - t0)
    finally:
        gc.enable()
    return best


@criterion("criterion 11: complexity smoke test")
def test_complexity():
    sizes = (500, 1000, 2000, 4000)
    sort_jobs, rest_jobs = [], []
    for n in sizes:
        ds = generate_synth(SynthParams(n=n, seed=11)).dataset
        view = perturb_treatment(ds, PrivacyLevel.LABEL, None, None)
        scores = score(train(ds), ds)
        m = build_sorted_matrices(scores, view)

        def rest(ds=ds, view=view, m=m):
            score(train(ds), ds)
            plan = plan_limits(m, view.counts, MatchConfig(), PrivacyLevel.LABEL, 1.0)
            capped_counterfactuals(ds, m, view, plan)

        sort_jobs.append(lambda scores=scores, view=view: build_sorted_matrices(scores, view))
        rest_jobs.append(rest)
    sort_t = _interleaved_min_times(sort_jobs, 30)
    rest_t = _interleaved_min_times(rest_jobs, 5)
    ratios = [b / a for a, b in zip(sort_t, sort_t[1:])]
    assert max(ratios) <= 4.5, ratios
    slope = np.polyfit(np.log(sizes), np.log(rest_t), 1)[0]
    assert slope < 2.0, (slope, rest_t)
