"""Tests for quantiles, thresholds, prediction sets, and coverage metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpbias.conformal import (
    conformal_threshold,
    coverage_gap,
    coverage_slack,
    empirical_quantile,
    evaluate_sets,
    prediction_set,
    threshold_index,
)

finite_floats = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


class TestEmpiricalQuantile:
    def test_half_of_four(self):
        assert empirical_quantile(np.array([1.0, 2.0, 3.0, 4.0]), 0.5) == 2.0

    def test_full_level_is_max(self):
        assert empirical_quantile(np.arange(1.0, 11.0), 1.0) == 10.0

    def test_counting_definition(self):
        values = np.array([0.1 * i for i in range(1, 11)])
        # need count >= 8.3, so the 9th smallest
        assert empirical_quantile(values, 0.83) == values[8]

    def test_level_above_one_gives_sentinel(self):
        assert empirical_quantile(np.array([1.0, 2.0]), 1.2) == math.inf

    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="non-empty"):
            empirical_quantile(np.array([]), 0.5)

    def test_rejects_nonpositive_level(self):
        with pytest.raises(ValueError, match="positive"):
            empirical_quantile(np.array([1.0]), 0.0)

    def test_order_independent(self):
        values = np.array([3.0, 1.0, 2.0, 5.0, 4.0])
        assert empirical_quantile(values, 0.6) == empirical_quantile(np.sort(values), 0.6)

    @given(
        st.lists(finite_floats, min_size=1, max_size=40),
        st.floats(0.01, 0.999),
    )
    @settings(max_examples=200)
    def test_matches_brute_force_count(self, values, p):
        values = np.array(values)
        got = empirical_quantile(values, p)
        # inf{q : #{s <= q} >= p n} over the sample values themselves
        n = len(values)
        candidates = [q for q in np.sort(values) if (values <= q).sum() >= p * n - 1e-9]
        assert got == candidates[0]


class TestConformalThreshold:
    def test_ten_points_alpha_point_one(self):
        assert conformal_threshold(np.arange(1.0, 11.0), 0.1) == 10.0

    def test_nine_points_uses_maximum(self):
        # ceil(10 * 0.9) = 9 of 9: the largest score, not the sentinel
        assert conformal_threshold(np.arange(1.0, 10.0), 0.1) == 9.0

    def test_thousand_points(self):
        values = np.arange(1, 1001) / 1000.0
        assert conformal_threshold(values, 0.1) == pytest.approx(0.901)

    def test_sentinel_when_index_exceeds_n(self):
        assert conformal_threshold(np.array([1.0, 2.0, 3.0]), 0.1) == math.inf

    def test_threshold_index_exact_arithmetic(self):
        # regression guard: 10 * 0.9 must ceil to 9, never 10
        assert threshold_index(0.1, 9) == 9
        assert threshold_index(0.1, 1000) == 901
        assert threshold_index(0.5, 1) == 1

    def test_monotone_in_level(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal(57)
        thresholds = [conformal_threshold(values, a) for a in (0.01, 0.05, 0.1, 0.2, 0.5)]
        assert all(t1 >= t2 for t1, t2 in zip(thresholds, thresholds[1:]))

    def test_nonincreasing_when_largest_removed(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            values = rng.standard_normal(30)
            smaller = np.sort(values)[:-1]
            assert conformal_threshold(smaller, 0.2) <= conformal_threshold(values, 0.2)

    def test_counting_identity_for_distinct_scores(self):
        # exactly ceil((n+1)(1-alpha)) calibration scores sit at or below the threshold
        rng = np.random.default_rng(2)
        for n in (7, 10, 50, 101):
            values = rng.standard_normal(n)
            alpha = 0.1
            t = conformal_threshold(values, alpha)
            k = threshold_index(alpha, n)
            if k <= n:
                assert (values <= t).sum() == k

    def test_rejects_bad_alpha(self):
        with pytest.raises(ValueError, match="alpha"):
            conformal_threshold(np.array([1.0]), 1.5)


class TestPredictionSet:
    def test_threshold_splits_labels(self):
        member = prediction_set(np.array([0.2, 0.5, 0.9]), 0.5)
        np.testing.assert_array_equal(member, [True, True, False])

    def test_infinite_sentinel_includes_everything(self):
        member = prediction_set(np.array([0.2, 0.5, 0.9]), math.inf)
        assert member.all()

    def test_below_min_is_empty(self):
        member = prediction_set(np.array([0.2, 0.5, 0.9]), 0.1)
        assert not member.any()

    def test_nesting_in_threshold(self):
        rng = np.random.default_rng(3)
        scores = rng.random(12)
        small = prediction_set(scores, 0.3)
        large = prediction_set(scores, 0.7)
        assert (small <= large).all()


class TestEvaluate:
    def test_full_sets(self):
        sets = np.ones((4, 3), dtype=bool)
        report = evaluate_sets(sets, np.array([0, 1, 2, 0]))
        assert report.coverage == 1.0 and report.avg_size == 3.0

    def test_empty_sets(self):
        sets = np.zeros((4, 3), dtype=bool)
        report = evaluate_sets(sets, np.array([0, 1, 2, 0]))
        assert report.coverage == 0.0 and report.avg_size == 0.0

    def test_partial_coverage(self):
        sets = np.array([[True, False], [False, True], [True, False]])
        report = evaluate_sets(sets, np.array([0, 0, 0]))
        assert report.coverage == pytest.approx(2.0 / 3.0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="matching"):
            evaluate_sets(np.ones((3, 2), dtype=bool), np.array([0, 1]))


class TestGapAndSlack:
    def test_gap_values(self):
        assert coverage_gap(0.9, 0.1) == pytest.approx(0.0)
        assert coverage_gap(0.93, 0.1) == pytest.approx(0.03)
        assert coverage_gap(0.85, 0.1) == pytest.approx(0.05)

    def test_slack_values(self):
        assert coverage_slack(0.1, 9) == pytest.approx(0.1)
        assert coverage_slack(0.1, 1000) == pytest.approx(0.001)
        assert coverage_slack(0.5, 1) == pytest.approx(0.5)

    def test_slack_nonnegative_everywhere(self):
        for n in (1, 3, 17, 100, 999):
            for alpha in (0.01, 0.1, 0.25, 0.5, 0.9):
                assert coverage_slack(alpha, n) >= -1e-15


def test_sandwich_property_monte_carlo():
    """Mean coverage over replications lies in [1-a, 1-a+1/(n+1)] within MC error."""
    from cpbias.scores import ScoreSpec, Scorer, UPolicy
    from cpbias.synth import Distortion, GaussMixSpec, generate_classification, random_means
    from cpbias.rng import derive_key
    from cpbias.transforms import Identity

    means = random_means(3, 2, spread=1.5, seed=14)
    spec = GaussMixSpec(means=means, noise_sd=1.0, class_prior=np.full(3, 1 / 3))
    alpha, n_cal, n_test, reps = 0.1, 50, 200, 400
    scorer = Scorer(ScoreSpec("THR"), Identity(), UPolicy("fixed", 1.0))
    coverages = []
    for rep in range(reps):
        cal = generate_classification(spec, Distortion(1.5), n_cal, derive_key(77, rep, "cal"))
        test = generate_classification(spec, Distortion(1.5), n_test, derive_key(77, rep, "test"))
        t = conformal_threshold(scorer.true_scores(cal.model_logits, cal.labels, np.arange(n_cal)), alpha)
        member = scorer.all_scores(test.model_logits, np.arange(n_test)) <= t
        coverages.append(member[np.arange(n_test), test.labels].mean())
    coverages = np.array(coverages)
    stderr = coverages.std(ddof=1) / math.sqrt(reps)
    mean = coverages.mean()
    assert 1 - alpha - 3 * stderr <= mean <= 1 - alpha + 1.0 / (n_cal + 1) + 3 * stderr
