"""Conformalized quantile regression with same-set vs hold-out model selection.

The base learners are k-nearest-neighbour quantile regressors: the predicted
interval at x is the pair of empirical quantiles of the k nearest training
targets, under a per-feature scaled Euclidean distance.  A candidate grid
over (k, feature scaling) gives a model-selection problem; selecting the
candidate with the shortest conformalized interval on the same set that later
calibrates the interval correction reproduces the coverage bias of data
reuse, while selecting on a disjoint split does not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conformal import conformal_threshold, coverage_gap, empirical_quantile
from .rng import derive_key
from .synth import RegressionSpec, generate_regression

__all__ = [
    "KnnQuantileModel",
    "fit_knn_quantile",
    "cqr_score",
    "select_model_by_width",
    "knn_candidate_grid",
    "CqrCellResult",
    "run_cqr_experiment",
    "cqr_rows",
]


@dataclass(frozen=True)
class KnnQuantileModel:
    """k-NN conditional quantile predictor.

    ``levels`` are the (lower, upper) quantile levels; ``feature_scale``
    weights each feature inside the Euclidean distance.  Distance ties break
    by training index.
    """

    k: int
    levels: tuple[float, float]
    train_x: np.ndarray
    train_y: np.ndarray
    feature_scale: np.ndarray

    def predict_interval(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lo_level, hi_level = self.levels
        neigh = _neighbor_targets(self.train_x, self.train_y, X, self.feature_scale, self.k)
        neigh = np.sort(neigh, axis=1)
        lo_idx = _quantile_index(lo_level, self.k)
        hi_idx = _quantile_index(hi_level, self.k)
        return neigh[:, lo_idx - 1], neigh[:, hi_idx - 1]


def _quantile_index(level: float, k: int) -> int:
    # counting quantile: smallest index whose rank/k reaches the level
    return min(max(math.ceil(level * k - 1e-12), 1), k)


def _neighbor_targets(
    train_x: np.ndarray, train_y: np.ndarray, X: np.ndarray, scale: np.ndarray, k: int
) -> np.ndarray:
    sx = train_x * scale[None, :]
    qx = np.asarray(X, dtype=np.float64) * scale[None, :]
    d2 = (qx**2).sum(axis=1)[:, None] + (sx**2).sum(axis=1)[None, :] - 2.0 * qx @ sx.T
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return train_y[order]


def fit_knn_quantile(
    train_x: np.ndarray,
    train_y: np.ndarray,
    k: int,
    levels: tuple[float, float],
    feature_scale: np.ndarray | None = None,
) -> KnnQuantileModel:
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    if k < 1 or k > train_x.shape[0]:
        raise ValueError(f"k must lie in [1, {train_x.shape[0]}], got {k}")
    if not levels[0] < levels[1]:
        raise ValueError("lower quantile level must be below the upper one")
    if feature_scale is None:
        feature_scale = np.ones(train_x.shape[1])
    return KnnQuantileModel(
        k=k,
        levels=levels,
        train_x=train_x,
        train_y=train_y,
        feature_scale=np.asarray(feature_scale, dtype=np.float64),
    )


def cqr_score(y: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """max(lo - y, y - hi): nonpositive exactly when y lies inside [lo, hi]."""
    y = np.asarray(y, dtype=np.float64)
    return np.maximum(np.asarray(lo) - y, y - np.asarray(hi))


def _conformalized_width(model: KnnQuantileModel, X, y, alpha: float) -> tuple[float, float]:
    lo, hi = model.predict_interval(X)
    correction = conformal_threshold(cqr_score(y, lo, hi), alpha)
    width = float(np.maximum(hi - lo + 2.0 * correction, 0.0).mean())
    return width, correction


class _IntervalGrid:
    """Raw candidate intervals for one query set, distances shared per scaling.

    Equivalent to calling ``predict_interval`` of every grid model on the
    same queries, but each scaling's neighbour ordering is computed once and
    reused across all neighbour counts.
    """

    def __init__(self, train_x, train_y, queries, k_values, scale_values, levels):
        self.k_values = list(k_values)
        self.scale_values = list(scale_values)
        k_max = max(k_values)
        dim = train_x.shape[1]
        self.lo = {}
        self.hi = {}
        for s_idx, s in enumerate(self.scale_values):
            scale = np.ones(dim)
            if dim > 1:
                scale[1:] = s
            neigh = _neighbor_targets(train_x, train_y, queries, scale, k_max)
            for k_idx, k in enumerate(self.k_values):
                prefix = np.sort(neigh[:, :k], axis=1)
                lo_idx = _quantile_index(levels[0], k)
                hi_idx = _quantile_index(levels[1], k)
                self.lo[(k_idx, s_idx)] = prefix[:, lo_idx - 1]
                self.hi[(k_idx, s_idx)] = prefix[:, hi_idx - 1]

    def interval(self, candidate: int) -> tuple[np.ndarray, np.ndarray]:
        k_idx, s_idx = divmod(candidate, len(self.scale_values))
        return self.lo[(k_idx, s_idx)], self.hi[(k_idx, s_idx)]

    @property
    def num_candidates(self) -> int:
        return len(self.k_values) * len(self.scale_values)


def _select_on(grid: _IntervalGrid, y: np.ndarray, alpha: float) -> int:
    widths = np.empty(grid.num_candidates)
    for m in range(grid.num_candidates):
        lo, hi = grid.interval(m)
        correction = conformal_threshold(cqr_score(y, lo, hi), alpha)
        widths[m] = np.maximum(hi - lo + 2.0 * correction, 0.0).mean()
    return int(np.argmin(widths))


def select_model_by_width(
    models: list[KnnQuantileModel], X: np.ndarray, y: np.ndarray, alpha: float
) -> int:
    """Index of the candidate with the shortest same-batch conformalized interval.

    The correction is calibrated on the selection batch itself, inside the
    loop; ties go to the smallest index.
    """
    if len(models) < 1:
        raise ValueError("need at least one candidate model")
    widths = [_conformalized_width(m, X, y, alpha)[0] for m in models]
    return int(np.argmin(widths))


def knn_candidate_grid(
    train_x: np.ndarray,
    train_y: np.ndarray,
    k_values: list[int],
    scale_values: list[float],
    levels: tuple[float, float],
) -> list[KnnQuantileModel]:
    """Cartesian candidate grid over neighbour counts and second-feature scalings.

    Each scaling reweights every feature but the first, so different scalings
    genuinely reorder neighbourhoods whenever the data has at least two
    features.
    """
    dim = np.asarray(train_x).shape[1]
    models = []
    for k in k_values:
        for s in scale_values:
            scale = np.ones(dim)
            if dim > 1:
                scale[1:] = s
            models.append(fit_knn_quantile(train_x, train_y, k, levels, scale))
    return models


@dataclass(frozen=True)
class CqrCellResult:
    """Per-(cell, method) summary mirroring a coverage/length results table.

    Gap statistics here are per-replication |gap| averages (the convention of
    interval-regression result tables), so ``tuning_bias`` is the difference
    of the two methods' mean per-replication gaps.
    """

    n: int
    num_models: int
    method: str
    coverage_mean: float
    coverage_std: float
    length_mean: float
    length_std: float
    covgap_mean: float
    covgap_std: float
    coverages: np.ndarray


def run_cqr_experiment(
    data: RegressionSpec,
    k_values: list[int],
    scale_values: list[float],
    n: int,
    alpha: float,
    replications: int,
    seed: int,
    n_train: int = 400,
    n_test: int = 500,
) -> tuple[CqrCellResult, CqrCellResult, float]:
    """Same vs hold-out model selection at one calibration size.

    Returns (same_result, holdout_result, tuning_bias).  Both methods share
    the training, calibration, and test draws of each replication; hold-out
    additionally draws a disjoint selection set of the same size n, so its
    final calibration set matches the same-set arm.
    """
    levels = (alpha / 2.0, 1.0 - alpha / 2.0)
    cov = {"same": [], "holdout": []}
    length = {"same": [], "holdout": []}
    gaps = {"same": [], "holdout": []}
    for rep in range(replications):
        tx, ty = generate_regression(data, n_train, derive_key(seed, rep, "train"))
        cx, cy = generate_regression(data, n, derive_key(seed, rep, "cal"))
        sx, sy = generate_regression(data, n, derive_key(seed, rep, "sel"))
        ex, ey = generate_regression(data, n_test, derive_key(seed, rep, "test"))
        grid_cal = _IntervalGrid(tx, ty, cx, k_values, scale_values, levels)
        grid_sel = _IntervalGrid(tx, ty, sx, k_values, scale_values, levels)
        grid_test = _IntervalGrid(tx, ty, ex, k_values, scale_values, levels)

        for method, grid_pick, pick_y in (("same", grid_cal, cy), ("holdout", grid_sel, sy)):
            idx = _select_on(grid_pick, pick_y, alpha)
            lo, hi = grid_cal.interval(idx)
            correction = conformal_threshold(cqr_score(cy, lo, hi), alpha)
            lo_t, hi_t = grid_test.interval(idx)
            covered = (ey >= lo_t - correction) & (ey <= hi_t + correction)
            c = float(covered.mean())
            cov[method].append(c)
            length[method].append(float(np.maximum(hi_t - lo_t + 2.0 * correction, 0.0).mean()))
            gaps[method].append(coverage_gap(c, alpha))

    num_models = len(k_values) * len(scale_values)

    def cell(method: str) -> CqrCellResult:
        c = np.array(cov[method])
        w = np.array(length[method])
        g = np.array(gaps[method])
        return CqrCellResult(
            n=n,
            num_models=num_models,
            method=method,
            coverage_mean=float(c.mean()),
            coverage_std=float(c.std(ddof=1)) if len(c) > 1 else float("nan"),
            length_mean=float(w.mean()),
            length_std=float(w.std(ddof=1)) if len(w) > 1 else float("nan"),
            covgap_mean=float(g.mean()),
            covgap_std=float(g.std(ddof=1)) if len(g) > 1 else float("nan"),
            coverages=c,
        )

    same, hold = cell("same"), cell("holdout")
    return same, hold, same.covgap_mean - hold.covgap_mean


def cqr_rows(same: CqrCellResult, hold: CqrCellResult, sweep_key: str = "n") -> list[dict]:
    """Two CSV rows mirroring the result-table columns."""
    bias = same.covgap_mean - hold.covgap_mean
    rows = []
    for cell, bias_value in ((same, bias), (hold, "")):
        rows.append(
            {
                sweep_key: cell.n if sweep_key == "n" else cell.num_models,
                "method": cell.method,
                "coverage_mean": cell.coverage_mean,
                "coverage_std": cell.coverage_std,
                "length_mean": cell.length_mean,
                "length_std": cell.length_std,
                "covgap_mean": cell.covgap_mean,
                "covgap_std": cell.covgap_std,
                "tuning_bias": bias_value,
            }
        )
    return rows
