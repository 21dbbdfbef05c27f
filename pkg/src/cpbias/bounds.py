"""Closed-form upper bounds on the coverage bias of same-set parameter tuning.

For a finite family of candidate score transformations of size m tuned on the
same n points used for calibration, the extra coverage gap is at most

    sqrt(log(2m) / (2n)) + 1 / (sqrt(2n) sqrt(log(2m))).

Grid-searched score parameters and score selection are instances of the
finite bound with m = (gamma grid size) * (max rank) and m = (number of
candidates) respectively.  For a d-dimensional continuous parameter space the
bound is C sqrt((d+1) / n) for an unquantified universal constant C, so that
variant is reported as uncertified.

A coverage gap can never exceed 1; reports carry both the raw formula value
and the value capped at 1 for display.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

__all__ = [
    "BoundReport",
    "finite_family_bound",
    "raps_bound",
    "selection_bound",
    "vc_bound",
    "finite_report",
    "TEMP_SCALE_DIM",
    "SCALAR_AFFINE_DIM",
    "vector_scale_dim",
    "rank_one_affine_dim",
    "matrix_scale_dim",
    "TEMP_SCALE_VC",
]

# Free-parameter counts of the calibration-map families.  An order-preserving
# constraint collapses vector scaling from 2K to 2 dimensions and matrix
# scaling from K^2 + K to K + 2.
TEMP_SCALE_DIM = 1
SCALAR_AFFINE_DIM = 2
TEMP_SCALE_VC = 2  # VC dimension of the induced threshold class, d + 1 with d = 1


def vector_scale_dim(num_classes: int) -> int:
    return 2 * num_classes


def rank_one_affine_dim(num_classes: int) -> int:
    return num_classes + 2


def matrix_scale_dim(num_classes: int) -> int:
    return num_classes * num_classes + num_classes


@dataclass(frozen=True)
class BoundReport:
    kind: str                 # "finite" | "raps" | "selection" | "vc"
    n: int
    value: float              # raw formula value, may exceed 1
    capped: float             # min(value, 1) for display
    certified: bool
    inputs: dict = field(default_factory=dict)
    note: str = ""


def finite_family_bound(cardinality: int, n: int) -> float:
    """Bias bound for a finite candidate family of the given cardinality."""
    if cardinality < 1:
        raise ValueError("cardinality must be at least 1")
    if n < 1:
        raise ValueError("n must be at least 1")
    log_term = math.log(2 * cardinality)
    return math.sqrt(log_term / (2 * n)) + 1.0 / (math.sqrt(2 * n) * math.sqrt(log_term))


def raps_bound(num_gamma: int, max_rank: int, n: int) -> float:
    """Finite bound at cardinality (gamma grid size) * (max penalized rank)."""
    if num_gamma < 1 or max_rank < 1:
        raise ValueError("num_gamma and max_rank must be at least 1")
    return finite_family_bound(num_gamma * max_rank, n)


def selection_bound(num_candidates: int, n: int) -> float:
    """Finite bound at cardinality = number of candidate score functions."""
    if num_candidates < 1:
        raise ValueError("num_candidates must be at least 1")
    return finite_family_bound(num_candidates, n)


def vc_bound(dim: int, n: int, constant: float = 1.0) -> BoundReport:
    """C sqrt((d+1)/n) for a d-dimensional continuous parameter space.

    The constant is a universal one that no closed form pins down, so the
    report is marked uncertified; it still carries the correct scaling in d
    and n.
    """
    if dim < 0:
        raise ValueError("dim must be nonnegative")
    if n < 1:
        raise ValueError("n must be at least 1")
    if not constant > 0:
        raise ValueError("constant must be positive")
    value = constant * math.sqrt((dim + 1) / n)
    return BoundReport(
        kind="vc",
        n=n,
        value=value,
        capped=min(value, 1.0),
        certified=False,
        inputs={"dim": dim, "constant": constant},
        note="constant is an unquantified universal constant; scaling only",
    )


def finite_report(kind: str, cardinality: int, n: int, **inputs) -> BoundReport:
    """BoundReport wrapper for the certified finite-family bounds."""
    if kind not in ("finite", "raps", "selection"):
        raise ValueError(f"kind must be finite/raps/selection, got {kind!r}")
    value = finite_family_bound(cardinality, n)
    return BoundReport(
        kind=kind,
        n=n,
        value=value,
        capped=min(value, 1.0),
        certified=True,
        inputs={"cardinality": cardinality, **inputs},
    )
