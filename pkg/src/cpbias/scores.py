"""Non-conformity scores for classification: THR, APS, RAPS, SAPS.

All four are functions of the softmax probabilities.  THR is deterministic;
the other three consume a uniform variate u that smooths the discrete jumps
of the cumulative construction.  ``UPolicy`` controls where u comes from: a
fixed constant (making every score call pure) or a seeded per-(sample, label)
stream that is identical for calibration and set construction and shared
across candidate transforms.

Scalar entry points mirror the definitions one-to-one; the ``score_matrix`` /
``true_label_scores`` pair is the vectorized equivalent used by experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import hash_uniform
from .transforms import Identity, Transform, apply_transform

__all__ = [
    "ScoreSpec",
    "UPolicy",
    "softmax",
    "label_rank",
    "thr_score",
    "aps_score",
    "raps_score",
    "saps_score",
    "score_with_transform",
    "score_matrix",
    "true_label_scores",
    "Scorer",
]

SCORE_KINDS = ("THR", "APS", "RAPS", "SAPS")


@dataclass(frozen=True)
class ScoreSpec:
    """Parameterized score family.

    ``gamma`` is the rank-regularization weight used by RAPS and SAPS;
    ``k_reg`` the rank at which the RAPS penalty starts.  ``randomized=False``
    pins u to 1, the conservative deterministic variant.
    """

    kind: str = "THR"
    gamma: float = 0.0
    k_reg: int = 1
    randomized: bool = True

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"kind must be one of {SCORE_KINDS}, got {self.kind!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.k_reg < 0:
            raise ValueError("k_reg must be nonnegative")


@dataclass(frozen=True)
class UPolicy:
    """Source of the uniform variate u.

    mode "fixed": every call uses ``value``.  mode "seeded": u is a pure
    function of (seed, sample id, label), replayable across calls.
    """

    mode: str = "fixed"
    value: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "seeded"):
            raise ValueError(f"mode must be 'fixed' or 'seeded', got {self.mode!r}")
        if self.mode == "fixed" and not (0.0 <= self.value <= 1.0):
            raise ValueError(f"fixed u must lie in [0, 1], got {self.value}")

    def matrix(self, ids: np.ndarray, num_classes: int) -> np.ndarray:
        """u values for each (sample, label) cell, shape (len(ids), K)."""
        ids = np.asarray(ids)
        if self.mode == "fixed":
            return np.full((ids.shape[0], num_classes), self.value)
        return hash_uniform(self.seed, ids[:, None], np.arange(num_classes)[None, :])

    def single(self, sample_id: int, label: int) -> float:
        if self.mode == "fixed":
            return self.value
        return float(hash_uniform(self.seed, sample_id, label))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis; rejects NaN input."""
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise ValueError("logits contain NaN")
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def label_rank(probs: np.ndarray, label: int) -> int:
    """1-based rank of probs[label] in descending order, ties to lower index."""
    p = np.asarray(probs, dtype=np.float64)
    target = p[label]
    greater = int((p > target).sum())
    tied_before = int((p[:label] == target).sum())
    return 1 + greater + tied_before


def thr_score(probs: np.ndarray, label: int) -> float:
    """1 - probability of the label."""
    return 1.0 - float(np.asarray(probs)[label])


def _check_u(u: float) -> None:
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"u must lie in [0, 1], got {u}")


def aps_score(probs: np.ndarray, label: int, u: float) -> float:
    """Mass strictly above the label's probability, plus u times its own.

    Equal-probability mass is excluded from the cumulative sum; it enters
    only through the u * p term.
    """
    _check_u(u)
    p = np.asarray(probs, dtype=np.float64)
    target = p[label]
    return float(p[p > target].sum() + u * target)


def raps_score(probs: np.ndarray, label: int, u: float, gamma: float, k_reg: int) -> float:
    """APS plus gamma * positive part of (rank - k_reg)."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    rank = label_rank(probs, label)
    return aps_score(probs, label, u) + gamma * max(rank - k_reg, 0)


def saps_score(probs: np.ndarray, label: int, u: float, gamma: float) -> float:
    """u * p_max at rank 1, else p_max + (rank - 2 + u) * gamma."""
    _check_u(u)
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    p = np.asarray(probs, dtype=np.float64)
    p_max = float(p.max())
    rank = label_rank(probs, label)
    if rank == 1:
        return u * p_max
    return p_max + (rank - 2 + u) * gamma


def score_with_transform(
    score: ScoreSpec,
    transform: Transform,
    logits: np.ndarray,
    label: int,
    u_policy: UPolicy,
    sample_id: int = 0,
) -> float:
    """Score of (logits, label) under softmax of the transformed logits."""
    probs = softmax(apply_transform(transform, logits))
    u = u_policy.single(sample_id, label) if score.randomized else 1.0
    if score.kind == "THR":
        return thr_score(probs, label)
    if score.kind == "APS":
        return aps_score(probs, label, u)
    if score.kind == "RAPS":
        return raps_score(probs, label, u, score.gamma, score.k_reg)
    return saps_score(probs, label, u, score.gamma)


def _ranks_and_greater_mass(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell 1-based descending rank and strictly-greater probability mass.

    A stable argsort of -P orders equal probabilities by label index, which
    is exactly the declared tie rule.
    """
    n, K = P.shape
    order = np.argsort(-P, axis=1, kind="stable")
    sorted_p = np.take_along_axis(P, order, axis=1)
    csum = np.cumsum(sorted_p, axis=1)
    # first occurrence index of each run of equal values in the sorted row
    idx = np.arange(K)
    is_new = np.ones((n, K), dtype=bool)
    is_new[:, 1:] = sorted_p[:, 1:] != sorted_p[:, :-1]
    first = np.maximum.accumulate(np.where(is_new, idx[None, :], 0), axis=1)
    greater_sorted = np.where(first > 0, np.take_along_axis(csum, np.maximum(first - 1, 0), axis=1), 0.0)
    ranks = np.empty((n, K), dtype=np.int64)
    np.put_along_axis(ranks, order, idx[None, :] + 1, axis=1)
    greater = np.empty_like(P)
    np.put_along_axis(greater, order, greater_sorted, axis=1)
    return ranks, greater


def score_matrix(
    score: ScoreSpec,
    transform: Transform,
    logits: np.ndarray,
    u_policy: UPolicy,
    ids: np.ndarray,
) -> np.ndarray:
    """Scores for every (sample, label) cell; shape (n, K)."""
    P = softmax(apply_transform(transform, logits))
    n, K = P.shape
    if score.kind == "THR":
        return 1.0 - P
    U = u_policy.matrix(ids, K) if score.randomized else np.ones((n, K))
    ranks, greater = _ranks_and_greater_mass(P)
    if score.kind == "APS":
        return greater + U * P
    if score.kind == "RAPS":
        return greater + U * P + score.gamma * np.maximum(ranks - score.k_reg, 0)
    p_max = P.max(axis=1, keepdims=True)
    return np.where(ranks == 1, U * p_max, p_max + (ranks - 2 + U) * score.gamma)


def true_label_scores(
    score: ScoreSpec,
    transform: Transform,
    logits: np.ndarray,
    labels: np.ndarray,
    u_policy: UPolicy,
    ids: np.ndarray,
) -> np.ndarray:
    """Scores at the true labels only; shape (n,)."""
    all_scores = score_matrix(score, transform, logits, u_policy, ids)
    return np.take_along_axis(all_scores, np.asarray(labels)[:, None], axis=1)[:, 0]


class Scorer:
    """A score spec bound to a transform and a u policy.

    The unit every tuner produces: experiments only ever need "all-label
    scores" and "true-label scores" for a batch of logits with stable ids.
    """

    def __init__(self, score: ScoreSpec, transform: Transform | None = None, u_policy: UPolicy | None = None):
        self.score = score
        self.transform = transform if transform is not None else Identity()
        self.u_policy = u_policy if u_policy is not None else UPolicy("fixed", 1.0)

    def all_scores(self, logits: np.ndarray, ids: np.ndarray) -> np.ndarray:
        return score_matrix(self.score, self.transform, logits, self.u_policy, ids)

    def true_scores(self, logits: np.ndarray, labels: np.ndarray, ids: np.ndarray) -> np.ndarray:
        return true_label_scores(self.score, self.transform, logits, labels, self.u_policy, ids)
