"""Tests for the synthetic data generators."""

import math

import numpy as np
import pytest

from cpbias.scores import softmax
from cpbias.synth import (
    Distortion,
    GaussMixSpec,
    RegressionSpec,
    generate_classification,
    generate_regression,
    random_means,
    regression_mean,
    regression_noise_scale,
    true_posterior,
    write_classification_csv,
)


def binary_spec(noise_sd=1.0, prior=(0.5, 0.5)):
    return GaussMixSpec(
        means=np.array([[-1.0], [1.0]]),
        noise_sd=noise_sd,
        class_prior=np.array(prior),
    )


class TestSpecValidation:
    def test_rejects_nonpositive_noise(self):
        with pytest.raises(ValueError, match="noise_sd"):
            binary_spec(noise_sd=0.0)

    def test_rejects_bad_prior_sum(self):
        with pytest.raises(ValueError, match="sum to 1"):
            binary_spec(prior=(0.6, 0.5))

    def test_rejects_negative_prior(self):
        with pytest.raises(ValueError, match="nonnegative"):
            binary_spec(prior=(1.2, -0.2))

    def test_rejects_coincident_means(self):
        with pytest.raises(ValueError, match="coincide"):
            GaussMixSpec(
                means=np.array([[1.0], [1.0]]),
                noise_sd=1.0,
                class_prior=np.array([0.5, 0.5]),
            )

    def test_rejects_empty_prior(self):
        with pytest.raises(ValueError):
            GaussMixSpec(means=np.zeros((0, 1)), noise_sd=1.0, class_prior=np.array([]))

    def test_distortion_requires_positive_temp(self):
        with pytest.raises(ValueError, match="true_temp"):
            Distortion(true_temp=-1.0)


class TestTruePosterior:
    def test_binary_logistic_closed_form(self):
        # means -1/+1, sigma 1: posterior of class 1 at x is logistic(2x)
        spec = binary_spec()
        posterior = true_posterior(spec, np.array([0.5]))
        expected = 1.0 / (1.0 + math.exp(-2.0 * 0.5))
        assert posterior[1] == pytest.approx(expected, abs=1e-12)
        assert posterior.sum() == pytest.approx(1.0, abs=1e-12)

    def test_equidistant_point_gives_uniform(self):
        spec = GaussMixSpec(
            means=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
            noise_sd=1.0,
            class_prior=np.full(3, 1.0 / 3.0),
        )
        posterior = true_posterior(spec, np.full(3, 1.0 / 3.0))
        np.testing.assert_allclose(posterior, 1.0 / 3.0, atol=1e-9)

    def test_degenerate_prior_pins_posterior(self):
        spec = binary_spec(prior=(1.0, 0.0))
        posterior = true_posterior(spec, np.array([7.3]))
        np.testing.assert_allclose(posterior, [1.0, 0.0], atol=0)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dimension"):
            true_posterior(binary_spec(), np.array([0.0, 1.0]))


class TestGenerateClassification:
    def test_vanishing_noise_at_class_mean(self):
        spec = binary_spec(noise_sd=1e-3)
        posterior = true_posterior(spec, np.array([-1.0]))
        np.testing.assert_allclose(posterior, [1.0, 0.0], atol=1e-9)

    def test_identity_distortion_is_bitwise(self):
        spec = binary_spec()
        batch = generate_classification(spec, Distortion(1.0, np.zeros(2)), 50, seed=3)
        np.testing.assert_array_equal(batch.model_logits, batch.oracle_logits)

    def test_determinism(self):
        spec = binary_spec()
        dist = Distortion(2.0, np.array([0.5, -0.5]))
        a = generate_classification(spec, dist, 64, seed=11)
        b = generate_classification(spec, dist, 64, seed=11)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.model_logits, b.model_logits)

    def test_oracle_logits_match_posterior(self):
        means = random_means(5, 3, spread=2.0, seed=4)
        spec = GaussMixSpec(means=means, noise_sd=1.0, class_prior=np.full(5, 0.2))
        batch = generate_classification(spec, Distortion(), 10_000, seed=5)
        probs = softmax(batch.oracle_logits)
        expected = np.array([true_posterior(spec, x) for x in batch.features[:200]])
        np.testing.assert_allclose(probs[:200], expected, atol=1e-9)
        # logits are normalized to zero mean per row
        np.testing.assert_allclose(batch.oracle_logits.mean(axis=1), 0.0, atol=1e-9)

    def test_distortion_formula(self):
        spec = binary_spec()
        shift = np.array([0.3, -0.2])
        batch = generate_classification(spec, Distortion(2.5, shift), 20, seed=9)
        np.testing.assert_allclose(
            batch.model_logits, (batch.oracle_logits + shift) / 2.5, atol=1e-15
        )

    def test_label_frequencies_follow_prior(self):
        spec = binary_spec(prior=(0.8, 0.2))
        batch = generate_classification(spec, Distortion(), 20_000, seed=2)
        freq = (batch.labels == 0).mean()
        assert abs(freq - 0.8) < 4 * math.sqrt(0.8 * 0.2 / 20_000)

    def test_rejects_nonpositive_n(self):
        with pytest.raises(ValueError):
            generate_classification(binary_spec(), Distortion(), 0, seed=1)


class TestGenerateRegression:
    def test_noiseless_limit_hits_mean_exactly(self):
        spec = RegressionSpec(mean_fn="sinusoid", noise_level=0.0, feature_dim=2)
        X, y = generate_regression(spec, 100, seed=1)
        np.testing.assert_array_equal(y, regression_mean(spec, X))

    def test_same_seed_bitwise_identical(self):
        spec = RegressionSpec(noise_scale_fn="abs_linear", feature_dim=3)
        a = generate_regression(spec, 128, seed=42)
        b = generate_regression(spec, 128, seed=42)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_standardized_residuals_are_standard_normal(self):
        # Monte-Carlo oracle: (y - mean(x)) / scale(x) must be N(0, 1)
        spec = RegressionSpec(mean_fn="linear", noise_scale_fn="abs_linear", feature_dim=2)
        n = 100_000
        X, y = generate_regression(spec, n, seed=7)
        z = (y - regression_mean(spec, X)) / regression_noise_scale(spec, X)
        assert abs(z.mean()) < 4.0 / math.sqrt(n)
        assert abs(z.std() - 1.0) < 4.0 / math.sqrt(2 * n)

    def test_noise_scale_strictly_positive(self):
        spec = RegressionSpec(noise_scale_fn="abs_linear", feature_dim=2)
        X = np.zeros((5, 2))
        assert (regression_noise_scale(spec, X) > 0).all()

    def test_rejects_unknown_mean_fn(self):
        with pytest.raises(ValueError, match="mean_fn"):
            RegressionSpec(mean_fn="cubic")


def test_csv_round_trip(tmp_path):
    spec = binary_spec()
    batch = generate_classification(spec, Distortion(2.0), 7, seed=13)
    path = tmp_path / "batch.csv"
    write_classification_csv(batch, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x_0,label,logit_0,logit_1"
    assert len(lines) == 8
    first = lines[1].split(",")
    assert float(first[0]) == batch.features[0, 0]
    assert int(first[1]) == batch.labels[0]
    assert float(first[2]) == batch.model_logits[0, 0]
