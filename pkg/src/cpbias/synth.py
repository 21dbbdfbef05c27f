"""Synthetic data with analytically known conditional distributions.

Classification data comes from a Gaussian mixture whose class posteriors are
available in closed form, together with a deterministic "model view": the
exact log-posteriors distorted by a temperature and per-class shifts.  The
distortion makes confidence calibration a non-trivial tuning problem while
the ground truth stays computable to Monte-Carlo precision.

Regression data pairs a named mean function with a named noise-scale
function, supporting conformalized quantile-regression experiments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

__all__ = [
    "GaussMixSpec",
    "Distortion",
    "ClassificationBatch",
    "RegressionSpec",
    "true_posterior",
    "generate_classification",
    "generate_regression",
    "regression_mean",
    "regression_noise_scale",
    "random_means",
    "write_classification_csv",
]


@dataclass(frozen=True)
class GaussMixSpec:
    """Gaussian-mixture classification population.

    Parameters
    ----------
    means : ndarray of shape (num_classes, feature_dim)
        Class-conditional means; must be pairwise distinct.
    noise_sd : float
        Isotropic within-class standard deviation, > 0.
    class_prior : ndarray of shape (num_classes,)
        Mixing probabilities; nonnegative, summing to 1 within 1e-12.
    """

    means: np.ndarray
    noise_sd: float
    class_prior: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        prior = np.asarray(self.class_prior, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 1:
            raise ValueError("means must be a (num_classes, feature_dim) matrix")
        if not np.isfinite(means).all():
            raise ValueError("means must be finite")
        if not (self.noise_sd > 0):
            raise ValueError(f"noise_sd must be positive, got {self.noise_sd}")
        if prior.shape != (means.shape[0],):
            raise ValueError("class_prior length must equal the number of classes")
        if prior.size == 0:
            raise ValueError("class_prior must be non-empty")
        if (prior < 0).any():
            raise ValueError("class_prior entries must be nonnegative")
        if abs(prior.sum() - 1.0) > 1e-12:
            raise ValueError(f"class_prior must sum to 1 within 1e-12, got {prior.sum()!r}")
        for i in range(means.shape[0]):
            for j in range(i + 1, means.shape[0]):
                if np.array_equal(means[i], means[j]):
                    raise ValueError(f"means of classes {i} and {j} coincide")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "class_prior", prior)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class Distortion:
    """Deterministic miscalibration applied to oracle logits.

    The model view is ``(oracle_logits + class_shift) / true_temp``, so a
    perfectly tuned temperature recovers ``1 / true_temp`` and a perfectly
    tuned per-class bias recovers ``-class_shift`` up to a common constant.
    """

    true_temp: float = 1.0
    class_shift: np.ndarray | None = None

    def __post_init__(self):
        if not (self.true_temp > 0):
            raise ValueError(f"true_temp must be positive, got {self.true_temp}")
        if self.class_shift is not None:
            shift = np.asarray(self.class_shift, dtype=np.float64)
            if not np.isfinite(shift).all():
                raise ValueError("class_shift must be finite")
            object.__setattr__(self, "class_shift", shift)

    def apply(self, oracle_logits: np.ndarray) -> np.ndarray:
        shifted = oracle_logits if self.class_shift is None else oracle_logits + self.class_shift
        return shifted / self.true_temp


@dataclass(frozen=True)
class ClassificationBatch:
    features: np.ndarray     # (n, feature_dim)
    labels: np.ndarray       # (n,) ints in [0, num_classes)
    oracle_logits: np.ndarray  # (n, num_classes), softmax == true posterior
    model_logits: np.ndarray   # (n, num_classes), distorted view

    def __post_init__(self):
        n = self.features.shape[0]
        if not (self.labels.shape[0] == self.oracle_logits.shape[0] == self.model_logits.shape[0] == n):
            raise ValueError("row counts disagree across batch fields")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class RegressionSpec:
    """Regression population: named mean and noise-scale functions.

    ``mean_fn`` is one of ``linear`` (sum of coordinates) or ``sinusoid``
    (sine of pi times the coordinate sum).  ``noise_scale_fn`` is one of
    ``homoscedastic`` (constant 1) or ``abs_linear`` (0.1 + 0.5 * mean |x_j|,
    strictly positive everywhere).  ``noise_level`` multiplies the scale;
    0 gives the noiseless limit.
    """

    mean_fn: str = "linear"
    noise_scale_fn: str = "homoscedastic"
    feature_dim: int = 1
    noise_level: float = 1.0
    feature_range: tuple[float, float] = (-2.0, 2.0)

    def __post_init__(self):
        if self.mean_fn not in ("linear", "sinusoid"):
            raise ValueError(f"unknown mean_fn {self.mean_fn!r}")
        if self.noise_scale_fn not in ("homoscedastic", "abs_linear"):
            raise ValueError(f"unknown noise_scale_fn {self.noise_scale_fn!r}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be a positive integer")
        if self.noise_level < 0:
            raise ValueError("noise_level must be nonnegative")
        if not self.feature_range[0] < self.feature_range[1]:
            raise ValueError("feature_range must be increasing")


def random_means(num_classes: int, feature_dim: int, spread: float, seed: int) -> np.ndarray:
    """Draw pairwise-distinct class means, ``spread`` times standard normals."""
    rng = substream(seed, "means")
    means = spread * rng.standard_normal((num_classes, feature_dim))
    return means


def true_posterior(spec: GaussMixSpec, x: np.ndarray) -> np.ndarray:
    """Closed-form Bayes posterior over classes at a single feature vector.

    Returns a probability vector computed from the Gaussian class densities
    and the prior; sums to 1 within 1e-12.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.feature_dim,):
        raise ValueError(f"expected feature vector of dimension {spec.feature_dim}, got shape {x.shape}")
    return _posterior_rows(spec, x[None, :])[0]


def _unnormalized_log_posterior(spec: GaussMixSpec, X: np.ndarray) -> np.ndarray:
    # ||x - mu||^2 expanded so the cross term is a single matmul
    sq = (
        (X**2).sum(axis=1)[:, None]
        + (spec.means**2).sum(axis=1)[None, :]
        - 2.0 * X @ spec.means.T
    )
    np.maximum(sq, 0.0, out=sq)
    with np.errstate(divide="ignore"):
        log_prior = np.log(spec.class_prior)
    return log_prior[None, :] - sq / (2.0 * spec.noise_sd**2)


def _posterior_rows(spec: GaussMixSpec, X: np.ndarray) -> np.ndarray:
    logits = _unnormalized_log_posterior(spec, X)
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def _oracle_logits(spec: GaussMixSpec, X: np.ndarray) -> np.ndarray:
    """Log-posteriors with the per-row additive constant fixed to zero mean.

    Zero-prior classes keep -inf logits; the zero-mean normalization then
    runs over the finite entries only, which leaves the softmax unchanged.
    """
    u = _unnormalized_log_posterior(spec, X)
    finite = np.isfinite(u)
    if finite.all():
        return u - u.mean(axis=1, keepdims=True)
    shift = np.where(finite, u, 0.0).sum(axis=1) / finite.sum(axis=1)
    return u - shift[:, None]


def generate_classification(
    spec: GaussMixSpec, distortion: Distortion, n: int, seed: int
) -> ClassificationBatch:
    """Draw n i.i.d. labelled points with oracle and distorted model logits.

    Labels follow the class prior, features are Gaussian around the class
    mean, and ``softmax(oracle_logits)`` equals the closed-form posterior.
    Fully determined by (spec, distortion, n, seed).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if distortion.class_shift is not None and distortion.class_shift.shape != (spec.num_classes,):
        raise ValueError("class_shift length must equal the number of classes")
    rng_labels = substream(seed, "labels")
    rng_noise = substream(seed, "features")
    labels = rng_labels.choice(spec.num_classes, size=n, p=spec.class_prior)
    features = spec.means[labels] + spec.noise_sd * rng_noise.standard_normal((n, spec.feature_dim))
    oracle = _oracle_logits(spec, features)
    model = distortion.apply(oracle)
    return ClassificationBatch(features=features, labels=labels, oracle_logits=oracle, model_logits=model)


def regression_mean(spec: RegressionSpec, X: np.ndarray) -> np.ndarray:
    s = np.asarray(X, dtype=np.float64).sum(axis=-1)
    if spec.mean_fn == "linear":
        return s
    return np.sin(np.pi * s)


def regression_noise_scale(spec: RegressionSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if spec.noise_scale_fn == "homoscedastic":
        base = np.ones(X.shape[:-1])
    else:
        base = 0.1 + 0.5 * np.abs(X).mean(axis=-1)
    return spec.noise_level * base


def generate_regression(spec: RegressionSpec, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw n i.i.d. (features, target) pairs; targets = mean + scale * normal."""
    if n < 1:
        raise ValueError("n must be at least 1")
    lo, hi = spec.feature_range
    rng_x = substream(seed, "reg_features")
    rng_eps = substream(seed, "reg_noise")
    X = rng_x.uniform(lo, hi, size=(n, spec.feature_dim))
    y = regression_mean(spec, X) + regression_noise_scale(spec, X) * rng_eps.standard_normal(n)
    return X, y


def write_classification_csv(batch: ClassificationBatch, path) -> None:
    """Serialize a batch: columns x_0..x_{d-1}, label, logit_0..logit_{K-1}.

    The logit columns carry the model view (the observable logits).
    """
    d = batch.features.shape[1]
    k = batch.model_logits.shape[1]
    header = [f"x_{j}" for j in range(d)] + ["label"] + [f"logit_{j}" for j in range(k)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(batch)):
            row = [repr(float(v)) for v in batch.features[i]]
            row.append(str(int(batch.labels[i])))
            row.extend(repr(float(v)) for v in batch.model_logits[i])
            writer.writerow(row)
