"""Tests for the non-conformity scores."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpbias.rng import substream
from cpbias.scores import (
    ScoreSpec,
    Scorer,
    UPolicy,
    aps_score,
    label_rank,
    raps_score,
    saps_score,
    score_matrix,
    score_with_transform,
    softmax,
    thr_score,
    true_label_scores,
)
from cpbias.synth import Distortion, GaussMixSpec, generate_classification, random_means
from cpbias.transforms import Identity, TempScale


def random_probs(rng, n, k):
    p = rng.dirichlet(np.ones(k), size=n)
    return p


class TestSoftmax:
    def test_uniform_logits(self):
        np.testing.assert_allclose(softmax(np.zeros(3)), 1.0 / 3.0, atol=1e-15)

    def test_hand_value(self):
        expected = math.exp(2) / (math.exp(2) + 1)
        np.testing.assert_allclose(softmax(np.array([2.0, 0.0])), [expected, 1 - expected], atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-50, 50))
    @settings(max_examples=100)
    def test_shift_invariance(self, logits, shift):
        z = np.array(logits)
        np.testing.assert_allclose(softmax(z + shift), softmax(z), atol=1e-12)

    def test_large_logits_stable(self):
        p = softmax(np.array([1e4, 0.0]))
        assert p[0] == 1.0 and np.isfinite(p).all()

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="NaN"):
            softmax(np.array([np.nan, 0.0]))


class TestLabelRank:
    def test_top_label(self):
        assert label_rank(np.array([0.5, 0.3, 0.2]), 0) == 1

    def test_bottom_label(self):
        assert label_rank(np.array([0.5, 0.3, 0.2]), 2) == 3

    def test_tie_breaks_to_lower_index(self):
        assert label_rank(np.array([0.4, 0.4, 0.2]), 0) == 1
        assert label_rank(np.array([0.4, 0.4, 0.2]), 1) == 2


class TestScalarScores:
    def test_thr(self):
        assert thr_score(np.array([1.0, 0.0]), 0) == 0.0
        assert thr_score(np.array([0.3, 0.7]), 1) == pytest.approx(0.3)
        assert thr_score(np.full(4, 0.25), 2) == pytest.approx(0.75)

    def test_aps_hand_value(self):
        assert aps_score(np.array([0.5, 0.3, 0.2]), 1, 0.5) == pytest.approx(0.65)

    def test_aps_top_label_u0(self):
        assert aps_score(np.array([0.5, 0.3, 0.2]), 0, 0.0) == 0.0

    def test_aps_bottom_label_u1_is_total_mass(self):
        assert aps_score(np.array([0.5, 0.3, 0.2]), 2, 1.0) == pytest.approx(1.0)

    def test_aps_rejects_u_out_of_range(self):
        with pytest.raises(ValueError, match="u must lie"):
            aps_score(np.array([0.5, 0.5]), 0, 1.5)

    def test_aps_equal_mass_excluded(self):
        # ties contribute only through u * p, never through the cumulative sum
        assert aps_score(np.array([0.4, 0.4, 0.2]), 1, 0.0) == 0.0

    def test_raps_hand_value(self):
        got = raps_score(np.array([0.5, 0.3, 0.2]), 1, 0.5, 0.1, 1)
        assert got == pytest.approx(0.65 + 0.1 * 1)

    def test_raps_gamma_zero_equals_aps(self):
        rng = substream(0, "raps_aps")
        for _ in range(50):
            p = rng.dirichlet(np.ones(5))
            y = int(rng.integers(5))
            u = float(rng.random())
            assert raps_score(p, y, u, 0.0, 2) == aps_score(p, y, u)

    def test_raps_kreg_at_least_k_equals_aps(self):
        p = np.array([0.5, 0.3, 0.2])
        assert raps_score(p, 2, 0.7, 0.4, 3) == aps_score(p, 2, 0.7)

    def test_saps_hand_values(self):
        p = np.array([0.5, 0.3, 0.2])
        assert saps_score(p, 0, 0.4, 0.2) == pytest.approx(0.2)
        assert saps_score(p, 2, 0.0, 0.2) == pytest.approx(0.7)
        assert saps_score(p, 1, 0.0, 0.9) == pytest.approx(0.5)  # rank 2, u=0: exactly p_max

    def test_saps_monotone_in_rank(self):
        rng = substream(1, "saps_mono")
        for _ in range(50):
            p = np.sort(rng.dirichlet(np.ones(6)))[::-1]
            u, gamma = float(rng.random()), float(rng.random())
            scores = [saps_score(p, y, u, gamma) for y in range(6)]
            # p sorted descending means label order is rank order
            assert all(s1 <= s2 + 1e-12 for s1, s2 in zip(scores, scores[1:]))


class TestScoreRanges:
    def test_ranges_on_random_inputs(self):
        rng = substream(2, "ranges")
        n, k = 100_000, 6
        p = rng.dirichlet(np.ones(k), size=n)
        y = rng.integers(k, size=n)
        u = rng.random(n)
        gamma = 0.2
        rows = np.arange(n)
        target = p[rows, y]
        greater = np.where(p > target[:, None], p, 0.0).sum(axis=1)
        aps = greater + u * target
        assert ((aps >= 0) & (aps <= 1 + 1e-12)).all()
        thr = 1.0 - target
        assert ((thr >= 0) & (thr <= 1)).all()
        ranks = 1 + (p > target[:, None]).sum(axis=1)
        raps = aps + gamma * np.maximum(ranks - 1, 0)
        assert ((raps >= 0) & (raps <= 1 + gamma * k)).all()
        p_max = p.max(axis=1)
        saps = np.where(ranks == 1, u * p_max, p_max + (ranks - 2 + u) * gamma)
        assert ((saps >= 0) & (saps <= 1 + gamma * k)).all()


class TestUPolicy:
    def test_fixed_is_pure(self):
        policy = UPolicy("fixed", 0.25)
        assert policy.single(3, 1) == 0.25
        assert (policy.matrix(np.arange(4), 3) == 0.25).all()

    def test_seeded_is_replayable_per_cell(self):
        policy = UPolicy("seeded", seed=99)
        single = policy.single(7, 2)
        matrix = policy.matrix(np.array([5, 7]), 4)
        assert matrix[1, 2] == single
        again = UPolicy("seeded", seed=99).matrix(np.array([7]), 4)
        assert again[0, 2] == single

    def test_seeded_values_spread_uniformly(self):
        policy = UPolicy("seeded", seed=5)
        u = policy.matrix(np.arange(2000), 4).ravel()
        assert 0.0 <= u.min() and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.01

    def test_fixed_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            UPolicy("fixed", 1.5)


class TestBatchScoring:
    """The vectorized scorer must agree with the scalar definitions cell by cell."""

    @pytest.mark.parametrize("kind", ["THR", "APS", "RAPS", "SAPS"])
    def test_matrix_matches_scalar(self, kind):
        rng = substream(3, "batch", kind)
        n, k = 40, 5
        logits = rng.standard_normal((n, k))
        spec = ScoreSpec(kind, gamma=0.15, k_reg=2)
        policy = UPolicy("seeded", seed=17)
        ids = np.arange(n)
        got = score_matrix(spec, Identity(), logits, policy, ids)
        for i in range(n):
            for y in range(k):
                expected = score_with_transform(spec, Identity(), logits[i], y, policy, sample_id=i)
                assert got[i, y] == pytest.approx(expected, abs=1e-12)

    def test_matrix_handles_tied_probabilities(self):
        logits = np.log(np.array([[0.4, 0.4, 0.2]]))
        spec = ScoreSpec("APS")
        got = score_matrix(spec, Identity(), logits, UPolicy("fixed", 0.0), np.array([0]))
        np.testing.assert_allclose(got[0], [0.0, 0.0, 0.8], atol=1e-12)

    def test_true_label_scores_consistent(self):
        rng = substream(4, "true")
        logits = rng.standard_normal((30, 4))
        labels = rng.integers(4, size=30)
        spec = ScoreSpec("RAPS", gamma=0.1, k_reg=1)
        policy = UPolicy("seeded", seed=23)
        ids = np.arange(30)
        full = score_matrix(spec, Identity(), logits, policy, ids)
        true = true_label_scores(spec, Identity(), logits, labels, policy, ids)
        np.testing.assert_array_equal(true, full[np.arange(30), labels])


class TestTransformComposition:
    def test_identity_transform_is_bitwise(self):
        rng = substream(5, "compose")
        logits = rng.standard_normal(6)
        spec = ScoreSpec("APS")
        policy = UPolicy("fixed", 0.3)
        direct = aps_score(softmax(logits), 2, 0.3)
        via = score_with_transform(spec, Identity(), logits, 2, policy)
        assert via == direct

    def test_uniform_logits_thr_is_one_minus_uniform(self):
        k = 5
        got = score_with_transform(ScoreSpec("THR"), TempScale(3.0), np.zeros(k), 2, UPolicy("fixed", 1.0))
        assert got == pytest.approx(1.0 - 1.0 / k)

    def test_binary_temperature_preserves_thr_order(self):
        # pairwise-comparison oracle: in binary classification any temperature
        # leaves the order of THR scores across (sample, label) pairs unchanged.
        # Saturated softmax values can tie in floating point, so the check is
        # "no strict inversion" rather than argsort equality.
        rng = substream(6, "binary_order")
        n = 1000
        logits = rng.standard_normal((n, 2)) * 3.0
        labels = rng.integers(2, size=n)
        base = np.array(
            [thr_score(softmax(logits[i]), labels[i]) for i in range(n)]
        )
        pairs = rng.integers(0, n, size=(1000, 2))
        for temp in np.exp(np.linspace(-2, 2, 10)):
            transformed = np.array(
                [
                    score_with_transform(
                        ScoreSpec("THR"), TempScale(float(temp)), logits[i], labels[i], UPolicy("fixed", 1.0)
                    )
                    for i in range(n)
                ]
            )
            d_base = np.sign(base[pairs[:, 0]] - base[pairs[:, 1]])
            d_trans = np.sign(transformed[pairs[:, 0]] - transformed[pairs[:, 1]])
            assert (d_base * d_trans >= 0).all()


def test_aps_on_true_posterior_is_uniform():
    """With oracle probabilities and randomized u, the true-label APS score is U(0,1)."""
    from scipy import stats

    means = random_means(4, 2, spread=1.5, seed=8)
    spec = GaussMixSpec(means=means, noise_sd=1.0, class_prior=np.full(4, 0.25))
    batch = generate_classification(spec, Distortion(), 4000, seed=21)
    scorer = Scorer(ScoreSpec("APS"), Identity(), UPolicy("seeded", seed=31))
    scores = scorer.true_scores(batch.oracle_logits, batch.labels, np.arange(4000))
    result = stats.kstest(scores, "uniform")
    assert result.pvalue > 0.01
