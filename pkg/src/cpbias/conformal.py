"""Split conformal prediction: quantiles, thresholds, sets, and coverage.

The empirical quantile is the counting definition
``Q_p(S) = inf{q : #{s <= q} >= p n}``, i.e. the ceil(p n)-th smallest score,
with no interpolation.  The calibration threshold is the quantile at level
``(1 - alpha)(1 + 1/n)``, equivalently the ceil((n+1)(1-alpha))-th smallest
calibration score; when that index exceeds n the threshold is +inf and the
prediction set contains every label.

Quantile indices are computed in exact decimal arithmetic (``Fraction`` of
the argument's decimal representation) so that levels like 0.9 * 10 never
ceil to the wrong integer through float round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = [
    "CoverageReport",
    "empirical_quantile",
    "conformal_threshold",
    "threshold_index",
    "prediction_set",
    "evaluate_sets",
    "coverage_gap",
    "coverage_slack",
]


@dataclass(frozen=True)
class CoverageReport:
    coverage: float
    avg_size: float
    n_test: int
    alpha: float | None = None


def _exact(x: float | int) -> Fraction:
    # decimal-literal semantics: 0.1 means a tenth, not the nearest double
    return Fraction(str(x))


def _checked_scores(scores: np.ndarray) -> np.ndarray:
    values = np.asarray(scores, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("scores must be non-empty")
    if not np.isfinite(values).all():
        raise ValueError("scores must be finite")
    return values


def empirical_quantile(scores: np.ndarray, p: float) -> float:
    """ceil(p n)-th smallest score; +inf when the index exceeds n.

    Requires p > 0 and non-empty scores.  p may exceed 1, in which case the
    +inf sentinel signals "include everything".
    """
    values = _checked_scores(scores)
    if not p > 0:
        raise ValueError(f"p must be positive, got {p}")
    n = values.size
    k = math.ceil(_exact(p) * n)
    if k > n:
        return math.inf
    k = max(k, 1)
    return float(np.partition(values, k - 1)[k - 1])


def threshold_index(alpha: float, n: int) -> int:
    """ceil((n+1)(1-alpha)) computed in exact decimal arithmetic."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if n < 1:
        raise ValueError("n must be at least 1")
    return math.ceil((n + 1) * (1 - _exact(alpha)))


def conformal_threshold(scores: np.ndarray, alpha: float) -> float:
    """Calibration threshold: the ceil((n+1)(1-alpha))-th smallest score.

    Returns +inf when the index exceeds n (small calibration sets), which
    makes the prediction set the full label set.
    """
    values = _checked_scores(scores)
    k = threshold_index(alpha, values.size)
    if k > values.size:
        return math.inf
    return float(np.partition(values, k - 1)[k - 1])


def prediction_set(label_scores: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean membership mask: label included iff its score <= threshold."""
    scores = np.asarray(label_scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ValueError("label scores must not be NaN")
    return scores <= threshold


def evaluate_sets(sets: np.ndarray, labels: np.ndarray, alpha: float | None = None) -> CoverageReport:
    """Empirical coverage and mean cardinality of prediction sets.

    ``sets`` is an (n, K) boolean membership array, ``labels`` the n true
    labels.
    """
    sets = np.asarray(sets, dtype=bool)
    labels = np.asarray(labels)
    if sets.ndim != 2 or sets.shape[0] != labels.shape[0]:
        raise ValueError("sets and labels must have matching lengths")
    n = sets.shape[0]
    covered = sets[np.arange(n), labels]
    return CoverageReport(
        coverage=float(covered.mean()),
        avg_size=float(sets.sum(axis=1).mean()),
        n_test=n,
        alpha=alpha,
    )


def coverage_gap(coverage: float, alpha: float) -> float:
    """|(1 - alpha) - coverage|."""
    if not 0.0 <= coverage <= 1.0:
        raise ValueError(f"coverage must lie in [0, 1], got {coverage}")
    return abs((1.0 - alpha) - coverage)


def coverage_slack(alpha: float, n: int) -> float:
    """Built-in over-coverage of the split threshold rule.

    ceil((n+1)(1-alpha))/n - (1-alpha): the gap between the empirical level
    the threshold actually attains on the calibration set and the nominal
    level.  Nonnegative; shrinks like 1/n.
    """
    k = threshold_index(alpha, n)
    return k / n - (1.0 - alpha)
