import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import random_dataset
from private_ate.core import Dataset, DegenerateGroups, GroupCounts, PrivacyLevel
from private_ate.dp_primitives import BudgetLedger, NoiseSource, keep_probability
from private_ate.matching import TreatmentView, build_sorted_matrices, distance, perturb_treatment


def _view(bits):
    bits = np.asarray(bits, dtype=np.int8)
    return TreatmentView(bits=bits, perturbed=False, counts=GroupCounts.from_bits(bits))


def test_hand_sorted_row():
    scores = np.zeros(10)
    bits = np.zeros(10, dtype=np.int8)
    scores[[2, 7, 9]] = [0.4, 0.9, 0.55]
    bits[[2, 7, 9]] = 1
    scores[0] = 0.5
    m = build_sorted_matrices(scores, _view(bits))
    assert list(m.row_of(0)) == [9, 2, 7]


def test_equal_scores_follow_index_order():
    bits = np.array([1, 0, 1, 0, 0, 1], dtype=np.int8)
    m = build_sorted_matrices(np.full(6, 0.3), _view(bits))
    for row in m.h0:
        assert list(row) == [0, 2, 5]
    for row in m.h1:
        assert list(row) == [1, 3, 4]


def test_distance():
    assert distance(0.73, 0.41) == pytest.approx(0.32)
    assert distance(0.2, 0.2) == 0.0
    assert distance(0.1, 0.6) == distance(0.6, 0.1)


def test_degenerate_view():
    with pytest.raises(DegenerateGroups):
        build_sorted_matrices(np.array([0.1, 0.2]), _view([1, 1]))


def test_label_level_keeps_treatment(rng):
    ds = random_dataset(rng, 20, 2)
    led = BudgetLedger(eps_total=1.0)
    v = perturb_treatment(ds, PrivacyLevel.LABEL, None, None, led)
    assert v.bits is ds.treatment and not v.perturbed
    assert led.entries == []


def test_sample_level_disabled_keeps_bits(rng):
    ds = random_dataset(rng, 20, 2)
    v = perturb_treatment(ds, "sample", 1.0, NoiseSource(0, 3, disabled=True))
    np.testing.assert_array_equal(v.bits, ds.treatment)
    assert v.perturbed and v.counts.perturbed


def test_sample_level_flip_rate():
    n = 100_000
    t = np.arange(n) % 2
    ds = Dataset.from_arrays(t, np.full((n, 1), 0.5), np.zeros(n), 1.0)
    led = BudgetLedger(eps_total=2.0)
    v = perturb_treatment(ds, PrivacyLevel.SAMPLE, 1.4, NoiseSource(9, 3), led)
    flip = np.mean(v.bits != ds.treatment)
    want = 1 / (math.exp(1.4) + 1)
    assert abs(flip - want) < 0.01 * want
    assert 1 - keep_probability(1.4) == pytest.approx(want)
    assert led.total == 1.4


def test_matrices_are_post_processing(rng):
    ds = random_dataset(rng, 12, 2)
    led = BudgetLedger(eps_total=1.0)
    led.record("phase3", 1.0, "sequential")
    before = led.total
    build_sorted_matrices(rng.uniform(size=12), perturb_treatment(ds, "label", None, None))
    assert led.total == before


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["continuous", "coarse", "tied"]))
def test_matches_brute_force(seed, kind):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 40))
    bits = r.integers(0, 2, n)
    bits[0], bits[-1] = 0, 1
    scores = {"continuous": r.uniform(size=n), "coarse": r.uniform(size=n).round(1), "tied": r.integers(0, 3, n) / 2}[kind]
    m = build_sorted_matrices(scores, _view(bits))
    h0, h1 = oracles.brute_matrices(list(scores), list(bits))
    assert m.h0.tolist() == h0
    assert m.h1.tolist() == h1
    treated = set(np.flatnonzero(bits == 1))
    for row in m.h0:
        assert sorted(row) == sorted(treated)
    for i, row in zip(m.control_idx, m.h0):
        assert np.all(np.diff(np.abs(scores[i] - scores[row])) >= 0)


def test_label_level_matrices_ignore_seed(rng):
    ds = random_dataset(rng, 25, 2)
    s = rng.uniform(size=25)
    a = build_sorted_matrices(s, perturb_treatment(ds, "label", None, NoiseSource(1)))
    b = build_sorted_matrices(s, perturb_treatment(ds, "label", None, NoiseSource(2)))
    np.testing.assert_array_equal(a.h0, b.h0)
    np.testing.assert_array_equal(a.h1, b.h1)
