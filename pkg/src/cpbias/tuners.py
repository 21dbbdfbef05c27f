"""Parameter-tuning procedures for transformed non-conformity scores.

Continuous tuners (temperature, vector scaling, the smooth-size tuner)
minimize an objective by plain descent with Armijo backtracking; grid tuners
(RAPS/SAPS penalty, score selection, aggregation weights) scan a finite
candidate set and break ties deterministically.  Every same-batch objective
that needs a conformal threshold computes it on that batch with the standard
calibration rule, which is precisely what reusing the calibration data for
tuning means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .conformal import conformal_threshold
from .rng import substream
from .scores import ScoreSpec, Scorer, UPolicy, score_matrix, true_label_scores
from .transforms import (
    Identity,
    MatrixScale,
    RankOneAffineScale,
    TempScale,
    Transform,
    VectorScale,
    apply_transform,
)

__all__ = [
    "OptimizationError",
    "TunerResult",
    "nll",
    "nll_gradient_vector_scale",
    "fit_temperature",
    "DescentConfig",
    "fit_vector_scale",
    "freeze_mask_random",
    "fit_raps_params",
    "average_set_size",
    "select_score",
    "aggregation_grid",
    "fit_aggregation",
    "ConfTrConfig",
    "fit_conftr_linear",
]


class OptimizationError(RuntimeError):
    """Raised when a descent objective turns non-finite."""


@dataclass(frozen=True)
class TunerResult:
    transform: Transform
    objective_trace: np.ndarray
    iterations: int
    converged: bool


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def nll(transform: Transform, logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the labels under transformed logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    logp = _log_softmax(apply_transform(transform, logits))
    return float(-logp[np.arange(len(labels)), labels].mean())


def fit_temperature(logits: np.ndarray, labels: np.ndarray) -> TunerResult:
    """Fit a temperature by NLL: coarse log-grid, then golden-section.

    Searches temperature = exp(theta) over theta in [-6, 6] with a 61-point
    grid, then refines around the grid minimizer by golden-section search
    until the bracket is narrower than 1e-6.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) < logits.shape[1]:
        import warnings

        warnings.warn("batch smaller than the number of classes; temperature is weakly determined")

    def objective(theta: float) -> float:
        value = nll(TempScale(math.exp(theta)), logits, labels)
        if not math.isfinite(value):
            raise OptimizationError(f"temperature objective is not finite at theta={theta}")
        return value

    grid = np.linspace(-6.0, 6.0, 61)
    values = [objective(t) for t in grid]
    best = int(np.argmin(values))
    trace = [values[0]]
    for v in values[1:]:
        trace.append(min(trace[-1], v))

    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = objective(c), objective(d)
    iterations = 0
    while b - a > 1e-6:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = objective(d)
        iterations += 1
        trace.append(min(trace[-1], fc, fd))
    theta = (a + b) / 2.0
    trace.append(min(trace[-1], objective(theta)))
    return TunerResult(
        transform=TempScale(math.exp(theta)),
        objective_trace=np.array(trace),
        iterations=61 + iterations,
        converged=True,
    )


@dataclass(frozen=True)
class DescentConfig:
    max_iters: int = 500
    grad_tol: float = 1e-6
    armijo: float = 1e-4
    shrink: float = 0.5
    init_step: float = 1.0
    step_growth: float = 2.0
    max_step: float = 64.0


def nll_gradient_vector_scale(
    weight: np.ndarray, bias: np.ndarray, logits: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic NLL gradient w.r.t. elementwise weight and bias."""
    z = weight * logits + bias
    p = np.exp(_log_softmax(z))
    n = len(labels)
    residual = p.copy()
    residual[np.arange(n), labels] -= 1.0
    residual /= n
    return (residual * logits).sum(axis=0), residual.sum(axis=0)


def fit_vector_scale(
    logits: np.ndarray,
    labels: np.ndarray,
    freeze_mask: np.ndarray | None = None,
    config: DescentConfig = DescentConfig(),
) -> TunerResult:
    """Fit per-class weight and bias by NLL descent over unfrozen coordinates.

    Frozen coordinates keep their initialization (weight 1, bias 0).  Descent
    uses the analytic gradient with Armijo backtracking; stops when the
    unfrozen gradient infinity-norm drops below ``grad_tol`` or after
    ``max_iters`` iterations.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    K = logits.shape[1]
    if freeze_mask is None:
        freeze_mask = np.zeros((K, 2), dtype=bool)
    freeze_mask = np.asarray(freeze_mask, dtype=bool)
    if freeze_mask.shape != (K, 2):
        raise ValueError(f"freeze_mask must have shape ({K}, 2)")

    w = np.ones(K)
    b = np.zeros(K)
    if freeze_mask.all():
        value = nll(VectorScale(w, b, freeze_mask), logits, labels)
        return TunerResult(VectorScale(w, b, freeze_mask), np.array([value]), 0, True)

    free_w = ~freeze_mask[:, 0]
    free_b = ~freeze_mask[:, 1]
    n = len(labels)
    rows = np.arange(n)

    def value_and_probs(wv, bv):
        logp = _log_softmax(wv * logits + bv)
        return float(-logp[rows, labels].mean()), logp

    def gradient_from_logp(logp):
        residual = np.exp(logp)
        residual[rows, labels] -= 1.0
        residual /= n
        gw = np.where(free_w, (residual * logits).sum(axis=0), 0.0)
        gb = np.where(free_b, residual.sum(axis=0), 0.0)
        return gw, gb

    value, logp = value_and_probs(w, b)
    if not math.isfinite(value):
        raise OptimizationError("vector-scale objective is not finite at initialization")
    trace = [value]
    converged = False
    iterations = 0
    prev_x = None
    prev_g = None
    for iterations in range(1, config.max_iters + 1):
        gw, gb = gradient_from_logp(logp)
        gnorm_inf = max(np.abs(gw).max(), np.abs(gb).max())
        if gnorm_inf < config.grad_tol:
            converged = True
            iterations -= 1
            break
        x = np.concatenate([w, b])
        g = np.concatenate([gw, gb])
        # Barzilai-Borwein step seed, safeguarded by the Armijo backtracking
        if prev_x is not None:
            dx = x - prev_x
            dg = g - prev_g
            curvature = float(dx @ dg)
            step = float(dx @ dx) / curvature if curvature > 1e-18 else config.max_step
            step = min(max(step, 1e-12), config.max_step)
        else:
            step = config.init_step
        prev_x, prev_g = x, g
        gsq = float(g @ g)
        while True:
            new_w = w - step * gw
            new_b = b - step * gb
            new_value, new_logp = value_and_probs(new_w, new_b)
            if math.isnan(new_value):
                raise OptimizationError("vector-scale objective became NaN")
            if new_value <= value - config.armijo * step * gsq:
                break
            step *= config.shrink
            if step < 1e-18:
                # gradient no longer yields descent at float resolution
                converged = True
                break
        if step < 1e-18:
            iterations -= 1
            break
        w, b, value, logp = new_w, new_b, new_value, new_logp
        trace.append(value)
    return TunerResult(VectorScale(w, b, freeze_mask), np.array(trace), iterations, converged)


def freeze_mask_random(num_classes: int, frozen_fraction: float, seed: int) -> np.ndarray:
    """Freeze a uniformly random subset of the 2K (weight, bias) coordinates.

    Exactly round(2K * frozen_fraction) coordinates are frozen.
    """
    if not 0.0 <= frozen_fraction <= 1.0:
        raise ValueError("frozen_fraction must lie in [0, 1]")
    total = 2 * num_classes
    count = int(round(total * frozen_fraction))
    flat = np.zeros(total, dtype=bool)
    if count > 0:
        picks = substream(seed, "freeze").choice(total, size=count, replace=False)
        flat[picks] = True
    return flat.reshape(num_classes, 2)


def average_set_size(
    true_scores: np.ndarray, all_scores: np.ndarray, alpha: float
) -> float:
    """Mean prediction-set size after calibrating a threshold on this batch."""
    t = conformal_threshold(true_scores, alpha)
    return float((np.asarray(all_scores) <= t).sum(axis=1).mean())


def _grid(start: float, stop: float, step: float) -> np.ndarray:
    count = int(round((stop - start) / step)) + 1
    return np.round(start + step * np.arange(count), 6)


def fit_raps_params(
    logits: np.ndarray,
    labels: np.ndarray,
    score_kind: str,
    alpha: float,
    u_policy: UPolicy,
    ids: np.ndarray,
    k_reg: int = 1,
) -> tuple[float, int]:
    """Two-stage penalty search for RAPS or SAPS by same-batch set size.

    Stage 1 scans gamma over 0.01..0.30 in steps of 0.01; stage 2 rescans
    [gamma* - 0.005, gamma* + 0.005] in steps of 0.001.  Ties go to the
    smaller gamma.  The RAPS rank offset stays fixed at ``k_reg``.
    """
    if score_kind not in ("RAPS", "SAPS"):
        raise ValueError(f"score_kind must be RAPS or SAPS, got {score_kind!r}")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    ids = np.asarray(ids)

    def size_at(gamma: float) -> float:
        spec = ScoreSpec(score_kind, gamma=float(gamma), k_reg=k_reg)
        all_scores = score_matrix(spec, Identity(), logits, u_policy, ids)
        true_scores = all_scores[np.arange(len(labels)), labels]
        return average_set_size(true_scores, all_scores, alpha)

    stage1 = _grid(0.01, 0.30, 0.01)
    sizes1 = np.array([size_at(g) for g in stage1])
    g1 = float(stage1[int(np.argmin(sizes1))])
    stage2 = _grid(g1 - 0.005, g1 + 0.005, 0.001)
    stage2 = stage2[stage2 >= 0]
    sizes2 = np.array([size_at(g) for g in stage2])
    return float(stage2[int(np.argmin(sizes2))]), k_reg


def select_score(
    candidates: list[Scorer],
    logits: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    ids: np.ndarray,
) -> int:
    """Index of the candidate with the smallest same-batch-calibrated set size.

    Ties go to the smallest index.
    """
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    labels = np.asarray(labels)
    sizes = []
    for scorer in candidates:
        all_scores = scorer.all_scores(logits, ids)
        true_scores = all_scores[np.arange(len(labels)), labels]
        sizes.append(average_set_size(true_scores, all_scores, alpha))
    return int(np.argmin(sizes))


def aggregation_grid(step: float = 0.1, m: int = 3) -> np.ndarray:
    """All m-tuples of nonnegative multiples of ``step`` summing to 1.

    Rows are emitted in ascending lexicographic order, so the first row is
    (0, ..., 0, 1).  ``step`` must divide 1.
    """
    units = Fraction(str(step))
    total = 1 / units
    if total.denominator != 1:
        raise ValueError(f"step must divide 1, got {step}")
    total = int(total)
    if m < 1:
        raise ValueError("m must be at least 1")

    rows: list[list[int]] = []

    def fill(prefix: list[int], remaining: int, slots: int):
        if slots == 1:
            rows.append(prefix + [remaining])
            return
        for v in range(remaining + 1):
            fill(prefix + [v], remaining - v, slots - 1)

    fill([], total, m)
    grid = np.array(rows, dtype=np.float64) * float(units)
    return np.round(grid, 12)


def fit_aggregation(
    weights_grid: np.ndarray,
    base_all_scores: np.ndarray,
    labels: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """Pick aggregation weights minimizing same-batch-calibrated set size.

    ``base_all_scores`` has shape (m, n, K): per-candidate scores for every
    label.  The aggregated score is the weighted sum.  Ties go to the
    ascending-lexicographically smallest weight vector.
    """
    weights_grid = np.asarray(weights_grid, dtype=np.float64)
    base = np.asarray(base_all_scores, dtype=np.float64)
    labels = np.asarray(labels)
    if weights_grid.ndim != 2 or weights_grid.shape[1] != base.shape[0]:
        raise ValueError("weights grid and score stack disagree on the number of candidates")
    order = np.lexsort(weights_grid.T[::-1])  # ascending lexicographic on (w_1, w_2, ...)
    n = base.shape[1]
    best_w = None
    best_size = math.inf
    for idx in order:
        w = weights_grid[idx]
        combined = np.tensordot(w, base, axes=(0, 0))
        true_scores = combined[np.arange(n), labels]
        size = average_set_size(true_scores, combined, alpha)
        if size < best_size:
            best_size = size
            best_w = w
    return best_w


@dataclass(frozen=True)
class ConfTrConfig:
    size_weight: float = 0.1   # weight of the smooth size loss
    tau: float = 0.1           # sigmoid temperature of the smooth set-membership
    max_iters: int = 300
    fd_step: float = 1e-5
    armijo: float = 1e-4
    shrink: float = 0.5
    init_step: float = 0.5
    step_growth: float = 2.0
    max_step: float = 8.0
    grad_tol: float = 1e-6


def _size_quantile_index(alpha: float, n: int) -> int:
    k = math.ceil(Fraction(str(1.0 - alpha)) * n)
    return min(max(k, 1), n)


def fit_conftr_linear(
    logits: np.ndarray,
    labels: np.ndarray,
    constraint: str,
    alpha: float,
    config: ConfTrConfig = ConfTrConfig(),
) -> TunerResult:
    """Fit a linear logit map by NLL plus a smooth prediction-set-size loss.

    The size loss counts labels whose THR score falls below a soft threshold
    (the (1-alpha) empirical quantile of the true-label THR scores, recomputed
    every iteration) through a sigmoid of width ``tau``.  ``constraint="none"``
    optimizes a full matrix map (K^2 + K parameters); ``"order_preserving"``
    optimizes a positive gain, a rank-one tilt, and an offset (K + 2
    parameters), which cannot reorder logits by construction.  Gradients are
    central finite differences.
    """
    if constraint not in ("none", "order_preserving"):
        raise ValueError(f"constraint must be 'none' or 'order_preserving', got {constraint!r}")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, K = logits.shape
    if n == 0:
        raise ValueError("batch must be non-empty")
    k_idx = _size_quantile_index(alpha, n)
    row = np.arange(n)

    if constraint == "none":
        dim = K * K + K
        theta0 = np.concatenate([np.eye(K).ravel(), np.zeros(K)])

        def transformed(thetas: np.ndarray) -> np.ndarray:
            W = thetas[:, : K * K].reshape(-1, K, K)
            bias = thetas[:, K * K :]
            return logits @ W.transpose(0, 2, 1) + bias[:, None, :]

        def to_transform(theta: np.ndarray) -> Transform:
            return MatrixScale(theta[: K * K].reshape(K, K).copy(), theta[K * K :].copy())

    else:
        dim = K + 2
        theta0 = np.zeros(dim)  # log-gain, mix, offset: identity-equivalent

        def transformed(thetas: np.ndarray) -> np.ndarray:
            gain = np.exp(thetas[:, 0])
            mix = thetas[:, 1 : K + 1]
            offset = thetas[:, K + 1]
            tilt = logits @ mix.T + offset[None, :]  # (n, P)
            return gain[:, None, None] * logits[None, :, :] + tilt.T[:, :, None]

        def to_transform(theta: np.ndarray) -> Transform:
            return RankOneAffineScale(math.exp(theta[0]), theta[1 : K + 1].copy(), theta[K + 1])

    def objective_batch(thetas: np.ndarray) -> np.ndarray:
        z = transformed(thetas)
        z -= z.max(axis=2, keepdims=True)
        np.exp(z, out=z)
        z /= z.sum(axis=2, keepdims=True)  # z now holds the probabilities
        p_true = z[:, row, labels]
        nll_vals = -np.log(p_true).mean(axis=1)
        thr_true = 1.0 - p_true
        t_soft = np.partition(thr_true, k_idx - 1, axis=1)[:, k_idx - 1]
        # sigmoid((t_soft - (1 - p)) / tau) computed in place on the prob cube
        z += (t_soft - 1.0)[:, None, None]
        z /= -config.tau
        np.exp(z, out=z)
        z += 1.0
        np.reciprocal(z, out=z)
        size_vals = z.sum(axis=2).mean(axis=1)
        return nll_vals + config.size_weight * size_vals

    def objective(theta: np.ndarray) -> float:
        return float(objective_batch(theta[None, :])[0])

    def gradient(theta: np.ndarray) -> np.ndarray:
        h = config.fd_step
        probes = np.repeat(theta[None, :], 2 * dim, axis=0)
        probes[:dim, :] += h * np.eye(dim)
        probes[dim:, :] -= h * np.eye(dim)
        vals = objective_batch(probes)
        return (vals[:dim] - vals[dim:]) / (2 * h)

    theta = theta0.copy()
    value = objective(theta)
    if not math.isfinite(value):
        raise OptimizationError("objective is not finite at initialization")
    trace = [value]
    step = config.init_step
    converged = config.max_iters == 0
    iterations = 0
    for iterations in range(1, config.max_iters + 1):
        g = gradient(theta)
        gnorm_inf = float(np.abs(g).max())
        if gnorm_inf < config.grad_tol:
            converged = True
            iterations -= 1
            break
        gsq = float((g**2).sum())
        step = min(step * config.step_growth, config.max_step)
        while True:
            candidate = theta - step * g
            new_value = objective(candidate)
            if math.isnan(new_value):
                raise OptimizationError("objective became NaN during line search")
            if new_value <= value - config.armijo * step * gsq:
                break
            step *= config.shrink
            if step < 1e-18:
                converged = True
                break
        if step < 1e-18:
            iterations -= 1
            break
        theta, value = candidate, new_value
        trace.append(value)
    if config.max_iters == 0:
        iterations = 0
    return TunerResult(to_transform(theta), np.array(trace), iterations, converged)
