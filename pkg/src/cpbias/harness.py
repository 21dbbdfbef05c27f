"""Monte-Carlo measurement of the coverage bias caused by same-set tuning.

One replication draws fresh calibration, tuning, and test data, fits the
chosen tuner, calibrates a conformal threshold, and evaluates coverage on the
test split.  The two protocols differ in one thing only:

* ``SameSet``   - the tuner sees the calibration points themselves;
* ``HoldOut``   - the tuner sees a disjoint split, sized so the final
  calibration set keeps the same n in both arms.

Both arms of one replication index consume identical calibration and test
draws and identical per-(sample, label) score randomization, so the bias
estimate is a paired difference.  Coverage is aggregated across replications
(marginal over calibration draws) and the gap to the nominal level is
reported per arm; the bias is the gap difference.

The module also hosts the empirical-process estimator (the sup over
candidate transforms and thresholds of the calibration-vs-population CDF
deviation, which upper-bounds the bias), a Monte-Carlo verifier of the
Dvoretzky-Kiefer-Wolfowitz inequality, and an exact-permutation Spearman
trend test used by the scaling-law sweeps.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import permutations

import numpy as np

from .conformal import conformal_threshold, coverage_gap, coverage_slack
from .rng import derive_key, hash_uniform, substream
from .scores import ScoreSpec, Scorer, UPolicy
from .synth import ClassificationBatch, Distortion, GaussMixSpec, generate_classification
from .transforms import Identity, Transform
from .tuners import (
    ConfTrConfig,
    DescentConfig,
    OptimizationError,
    aggregation_grid,
    fit_aggregation,
    fit_conftr_linear,
    fit_raps_params,
    fit_temperature,
    fit_vector_scale,
    freeze_mask_random,
    select_score,
)

__all__ = [
    "SameSet",
    "HoldOut",
    "IdentityTuner",
    "TemperatureTuner",
    "VectorScaleTuner",
    "GridScoreTuner",
    "SelectionTuner",
    "AggregationTuner",
    "ConfTrTuner",
    "ExperimentSpec",
    "ReplicationResult",
    "BiasEstimate",
    "SupDeviationEstimate",
    "TrendTest",
    "run_replication",
    "estimate_tuning_bias",
    "sweep_calibration_size",
    "sweep_complexity",
    "ks_two_sample",
    "estimate_sup_deviation",
    "sup_deviation_for_replication",
    "dkw_violation_rate",
    "spearman_trend",
    "tuner_name",
    "family_cardinality",
    "bias_rows",
]

_TUNE_ID_BASE = 1 << 20
_TEST_ID_BASE = 1 << 21


@dataclass(frozen=True)
class SameSet:
    pass


@dataclass(frozen=True)
class HoldOut:
    split_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")


# ---------------------------------------------------------------------------
# tuner choices


@dataclass(frozen=True)
class IdentityTuner:
    pass


@dataclass(frozen=True)
class TemperatureTuner:
    pass


@dataclass(frozen=True)
class VectorScaleTuner:
    unfrozen_fraction: float = 1.0
    config: DescentConfig = field(default_factory=DescentConfig)

    def __post_init__(self):
        if not 0.0 <= self.unfrozen_fraction <= 1.0:
            raise ValueError("unfrozen_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class GridScoreTuner:
    kind: str = "RAPS"  # RAPS or SAPS
    k_reg: int = 1

    def __post_init__(self):
        if self.kind not in ("RAPS", "SAPS"):
            raise ValueError("kind must be RAPS or SAPS")


@dataclass(frozen=True)
class SelectionTuner:
    """Pick, by smallest same-batch set size, among per-label power maps.

    Candidate m rescales the base THR score of label y to score**e(m, y),
    with exponents log-uniform on [1/spread, spread] addressed by candidate
    and label.  Each map is monotone within every label (a legitimate score
    reparameterization) but the family is not jointly order-preserving, so
    minimizing the empirical set size over many candidates genuinely
    overfits the batch.
    """

    num_candidates: int = 100
    exponent_spread: float = 3.0

    def __post_init__(self):
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be at least 1")
        if not self.exponent_spread > 1.0:
            raise ValueError("exponent_spread must exceed 1")


@dataclass(frozen=True)
class AggregationTuner:
    step: float = 0.1
    gamma_raps: float = 0.1
    gamma_saps: float = 0.2


@dataclass(frozen=True)
class ConfTrTuner:
    order_preserving: bool = False
    config: ConfTrConfig = field(default_factory=ConfTrConfig)


Tuner = (
    IdentityTuner
    | TemperatureTuner
    | VectorScaleTuner
    | GridScoreTuner
    | SelectionTuner
    | AggregationTuner
    | ConfTrTuner
)


def tuner_name(tuner: Tuner) -> str:
    return {
        IdentityTuner: "identity",
        TemperatureTuner: "temperature",
        VectorScaleTuner: "vector_scale",
        GridScoreTuner: "grid_score",
        SelectionTuner: "selection",
        AggregationTuner: "aggregation",
        ConfTrTuner: "conftr",
    }[type(tuner)]


@dataclass(frozen=True)
class ExperimentSpec:
    data: GaussMixSpec
    distortion: Distortion
    score: ScoreSpec
    tuner: Tuner
    protocol: SameSet | HoldOut
    alpha: float
    n_cal: int
    n_test: int
    replications: int
    base_seed: int

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_cal < 1 or self.n_test < 1 or self.replications < 1:
            raise ValueError("n_cal, n_test and replications must be at least 1")
        if self.n_cal >= _TUNE_ID_BASE or self.n_test >= _TUNE_ID_BASE:
            raise ValueError("batch sizes above 2^20 are not supported")


@dataclass(frozen=True)
class ReplicationResult:
    coverage: float
    avg_size: float
    transform: Transform
    detail: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# candidate families for selection and aggregation


class _PowerScorer:
    """THR-based scorer with a per-label power reparameterization."""

    def __init__(self, base: Scorer, exponents: np.ndarray):
        self.base = base
        self.exponents = exponents

    def all_scores(self, logits, ids):
        return self.base.all_scores(logits, ids) ** self.exponents[None, :]

    def true_scores(self, logits, labels, ids):
        all_scores = self.all_scores(logits, ids)
        return np.take_along_axis(all_scores, np.asarray(labels)[:, None], axis=1)[:, 0]


class _AggregateScorer:
    def __init__(self, components: list[Scorer], weights: np.ndarray):
        self.components = components
        self.weights = np.asarray(weights, dtype=np.float64)

    def all_scores(self, logits, ids):
        total = None
        for w, component in zip(self.weights, self.components):
            part = w * component.all_scores(logits, ids)
            total = part if total is None else total + part
        return total

    def true_scores(self, logits, labels, ids):
        all_scores = self.all_scores(logits, ids)
        return np.take_along_axis(all_scores, np.asarray(labels)[:, None], axis=1)[:, 0]


def _selection_exponents(tuner: SelectionTuner, num_classes: int, family_key: int) -> np.ndarray:
    """Exponent table (M, K); rows are addressable so M-prefixes nest."""
    m_idx = np.arange(tuner.num_candidates)[:, None]
    k_idx = np.arange(num_classes)[None, :]
    uniforms = hash_uniform(family_key, m_idx, k_idx)
    log_spread = math.log(tuner.exponent_spread)
    return np.exp((2.0 * uniforms - 1.0) * log_spread)


def _selection_candidates(
    tuner: SelectionTuner, num_classes: int, family_key: int, u_policy: UPolicy
) -> list[_PowerScorer]:
    base = Scorer(ScoreSpec("THR"), Identity(), u_policy)
    exponents = _selection_exponents(tuner, num_classes, family_key)
    return [_PowerScorer(base, exponents[m]) for m in range(tuner.num_candidates)]


def _power_select_index(
    base_all: np.ndarray, exponents: np.ndarray, labels: np.ndarray, alpha: float
) -> int:
    """Vectorized argmin-size selection over the power-map family.

    Exhaustive-scan equivalent of ``select_score`` over the same candidates
    (same tie rule: first index wins), chunked over candidates to bound
    memory.
    """
    from .conformal import threshold_index

    labels = np.asarray(labels)
    n, num_classes = base_all.shape
    k = threshold_index(alpha, n)
    if k > n:
        return 0  # every candidate yields the full label set
    rows = np.arange(n)
    sizes = np.empty(exponents.shape[0])
    chunk = max(1, 4_000_000 // (n * num_classes))
    for start in range(0, exponents.shape[0], chunk):
        exp_chunk = exponents[start : start + chunk]
        cube = base_all[None, :, :] ** exp_chunk[:, None, :]
        true = cube[:, rows, labels]
        thresholds = np.partition(true, k - 1, axis=1)[:, k - 1]
        sizes[start : start + len(exp_chunk)] = (
            (cube <= thresholds[:, None, None]).sum(axis=2).mean(axis=1)
        )
    return int(np.argmin(sizes))


def _aggregation_components(tuner: AggregationTuner, u_policy: UPolicy) -> list[Scorer]:
    return [
        Scorer(ScoreSpec("APS"), Identity(), u_policy),
        Scorer(ScoreSpec("RAPS", gamma=tuner.gamma_raps, k_reg=1), Identity(), u_policy),
        Scorer(ScoreSpec("SAPS", gamma=tuner.gamma_saps), Identity(), u_policy),
    ]


# ---------------------------------------------------------------------------
# fitting dispatch


def _fit_scorer(
    spec: ExperimentSpec,
    tune_logits: np.ndarray,
    tune_labels: np.ndarray,
    tune_ids: np.ndarray,
    u_policy: UPolicy,
    rep_key: int,
) -> tuple[Scorer | _PowerScorer | _AggregateScorer, Transform, dict]:
    tuner = spec.tuner
    if isinstance(tuner, IdentityTuner):
        return Scorer(spec.score, Identity(), u_policy), Identity(), {}
    if isinstance(tuner, TemperatureTuner):
        result = fit_temperature(tune_logits, tune_labels)
        return Scorer(spec.score, result.transform, u_policy), result.transform, {
            "temperature": result.transform.temperature
        }
    if isinstance(tuner, VectorScaleTuner):
        mask = freeze_mask_random(
            spec.data.num_classes, 1.0 - tuner.unfrozen_fraction, derive_key(rep_key, "freeze")
        )
        result = fit_vector_scale(tune_logits, tune_labels, mask, tuner.config)
        return Scorer(spec.score, result.transform, u_policy), result.transform, {
            "iterations": result.iterations
        }
    if isinstance(tuner, GridScoreTuner):
        gamma, k_reg = fit_raps_params(
            tune_logits, tune_labels, tuner.kind, spec.alpha, u_policy, tune_ids, tuner.k_reg
        )
        tuned = ScoreSpec(tuner.kind, gamma=gamma, k_reg=k_reg, randomized=spec.score.randomized)
        return Scorer(tuned, Identity(), u_policy), Identity(), {"gamma": gamma}
    if isinstance(tuner, SelectionTuner):
        family_key = derive_key(spec.base_seed, "selection_family")
        base = Scorer(ScoreSpec("THR"), Identity(), u_policy)
        exponents = _selection_exponents(tuner, spec.data.num_classes, family_key)
        base_all = base.all_scores(tune_logits, tune_ids)
        index = _power_select_index(base_all, exponents, tune_labels, spec.alpha)
        return _PowerScorer(base, exponents[index]), Identity(), {"selected": index}
    if isinstance(tuner, AggregationTuner):
        components = _aggregation_components(tuner, u_policy)
        stack = np.stack([c.all_scores(tune_logits, tune_ids) for c in components])
        grid = aggregation_grid(tuner.step, len(components))
        weights = fit_aggregation(grid, stack, tune_labels, spec.alpha)
        return _AggregateScorer(components, weights), Identity(), {"weights": weights.tolist()}
    if isinstance(tuner, ConfTrTuner):
        constraint = "order_preserving" if tuner.order_preserving else "none"
        result = fit_conftr_linear(tune_logits, tune_labels, constraint, spec.alpha, tuner.config)
        return Scorer(spec.score, result.transform, u_policy), result.transform, {
            "iterations": result.iterations
        }
    raise TypeError(f"unknown tuner {tuner!r}")


# ---------------------------------------------------------------------------
# replications


def _holdout_tune_size(n_cal: int, split_fraction: float) -> int:
    # keeps the final calibration set at n_cal in both arms
    return max(1, int(round(n_cal * split_fraction / (1.0 - split_fraction))))


def run_replication(spec: ExperimentSpec, rep_index: int) -> ReplicationResult:
    """One full draw-tune-calibrate-evaluate cycle under ``spec.protocol``.

    Deterministic in (spec, rep_index).  Both protocols share the calibration
    and test draws of the same replication index, so arm differences are due
    to tuning-set reuse alone.
    """
    base = spec.base_seed
    cal = generate_classification(spec.data, spec.distortion, spec.n_cal, derive_key(base, rep_index, "cal"))
    test = generate_classification(spec.data, spec.distortion, spec.n_test, derive_key(base, rep_index, "test"))
    cal_ids = np.arange(spec.n_cal)
    test_ids = _TEST_ID_BASE + np.arange(spec.n_test)
    u_policy = UPolicy("seeded", seed=derive_key(base, rep_index, "u"))
    rep_key = derive_key(base, rep_index, "tuner")

    if isinstance(spec.protocol, HoldOut):
        n_tune = _holdout_tune_size(spec.n_cal, spec.protocol.split_fraction)
        tune = generate_classification(spec.data, spec.distortion, n_tune, derive_key(base, rep_index, "tune"))
        tune_logits, tune_labels = tune.model_logits, tune.labels
        tune_ids = _TUNE_ID_BASE + np.arange(n_tune)
    else:
        tune_logits, tune_labels = cal.model_logits, cal.labels
        tune_ids = cal_ids

    try:
        scorer, transform, detail = _fit_scorer(spec, tune_logits, tune_labels, tune_ids, u_policy, rep_key)
    except OptimizationError as err:
        raise OptimizationError(f"replication {rep_index}: {err}") from err

    cal_scores = scorer.true_scores(cal.model_logits, cal.labels, cal_ids)
    threshold = conformal_threshold(cal_scores, spec.alpha)
    test_all = scorer.all_scores(test.model_logits, test_ids)
    member = test_all <= threshold
    covered = member[np.arange(spec.n_test), test.labels]
    return ReplicationResult(
        coverage=float(covered.mean()),
        avg_size=float(member.sum(axis=1).mean()),
        transform=transform,
        detail=detail,
    )


@dataclass(frozen=True)
class BiasEstimate:
    """Paired same-set vs hold-out summary over R replications.

    ``covgap_*`` is the gap of the replication-mean coverage to the nominal
    level; ``tuning_bias`` is their difference.  ``coverage_diff`` is the
    signed paired mean of (hold-out coverage - same-set coverage), whose
    standard error also serves as the bias standard error (the two coincide
    whenever both arms sit on the same side of the nominal level).
    """

    alpha: float
    n_cal: int
    replications: int
    coverage_same: float
    coverage_holdout: float
    coverage_same_stderr: float
    coverage_holdout_stderr: float
    covgap_same: float
    covgap_holdout: float
    tuning_bias: float
    tuning_bias_stderr: float
    coverage_diff: float
    coverage_diff_stderr: float
    avg_size_same: float
    avg_size_holdout: float
    coverages_same: np.ndarray
    coverages_holdout: np.ndarray


def _stderr(values: np.ndarray) -> float:
    if values.size < 2:
        return float("nan")
    return float(values.std(ddof=1) / math.sqrt(values.size))


def estimate_tuning_bias(spec: ExperimentSpec, threads: int = 1) -> BiasEstimate:
    """Run both protocols over paired replications and difference the gaps."""
    if spec.replications < 30:
        warnings.warn("fewer than 30 replications: standard errors are unreliable")
    same_spec = replace(spec, protocol=SameSet())
    hold_spec = replace(
        spec,
        protocol=spec.protocol if isinstance(spec.protocol, HoldOut) else HoldOut(),
    )

    def one(rep: int) -> tuple[ReplicationResult, ReplicationResult]:
        return run_replication(same_spec, rep), run_replication(hold_spec, rep)

    reps = range(spec.replications)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, reps))
    else:
        results = [one(rep) for rep in reps]

    cov_same = np.array([r[0].coverage for r in results])
    cov_hold = np.array([r[1].coverage for r in results])
    size_same = np.array([r[0].avg_size for r in results])
    size_hold = np.array([r[1].avg_size for r in results])
    gap_same = coverage_gap(float(cov_same.mean()), spec.alpha)
    gap_hold = coverage_gap(float(cov_hold.mean()), spec.alpha)
    diff = cov_hold - cov_same
    return BiasEstimate(
        alpha=spec.alpha,
        n_cal=spec.n_cal,
        replications=spec.replications,
        coverage_same=float(cov_same.mean()),
        coverage_holdout=float(cov_hold.mean()),
        coverage_same_stderr=_stderr(cov_same),
        coverage_holdout_stderr=_stderr(cov_hold),
        covgap_same=gap_same,
        covgap_holdout=gap_hold,
        tuning_bias=gap_same - gap_hold,
        tuning_bias_stderr=_stderr(diff),
        coverage_diff=float(diff.mean()),
        coverage_diff_stderr=_stderr(diff),
        avg_size_same=float(size_same.mean()),
        avg_size_holdout=float(size_hold.mean()),
        coverages_same=cov_same,
        coverages_holdout=cov_hold,
    )


def sweep_calibration_size(
    spec: ExperimentSpec, n_values: list[int], threads: int = 1
) -> list[tuple[int, BiasEstimate]]:
    """Bias estimate per calibration size, sharing replication seeds across sizes."""
    if not n_values:
        raise ValueError("n_values must be non-empty")
    if list(n_values) != sorted(n_values):
        raise ValueError("n_values must be increasing")
    out = []
    for n in n_values:
        out.append((n, estimate_tuning_bias(replace(spec, n_cal=n), threads=threads)))
    return out


def sweep_complexity(
    spec: ExperimentSpec, levels: list[float | int], threads: int = 1
) -> list[tuple[float | int, BiasEstimate]]:
    """Bias estimate per complexity level.

    For a ``VectorScaleTuner`` the level is the unfrozen parameter fraction;
    for a ``SelectionTuner`` it is the candidate count.
    """
    if not levels:
        raise ValueError("levels must be non-empty")
    out = []
    for level in levels:
        if isinstance(spec.tuner, VectorScaleTuner):
            tuner = replace(spec.tuner, unfrozen_fraction=float(level))
        elif isinstance(spec.tuner, SelectionTuner):
            tuner = replace(spec.tuner, num_candidates=int(level))
        else:
            raise ValueError("complexity sweeps need a vector-scale or selection tuner")
        out.append((level, estimate_tuning_bias(replace(spec, tuner=tuner), threads=threads)))
    return out


# ---------------------------------------------------------------------------
# empirical-process estimator


@dataclass(frozen=True)
class SupDeviationEstimate:
    value: float
    argmax_index: int
    argmax_t: float
    num_candidates: int
    calib_size: int
    reference_size: int


def ks_two_sample(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Exact two-sample Kolmogorov-Smirnov statistic and its location.

    The sup over thresholds of |ECDF_a - ECDF_b| is attained at a pooled
    sample point, so it is evaluated exactly there; no discretization.
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be non-empty")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    gaps = np.abs(cdf_a - cdf_b)
    idx = int(np.argmax(gaps))
    return float(gaps[idx]), float(pooled[idx])


def estimate_sup_deviation(
    calib_scores: list[np.ndarray], reference_scores: list[np.ndarray]
) -> SupDeviationEstimate:
    """Sup over candidates and thresholds of the calibration-CDF deviation.

    ``reference_scores[m]`` approximates the population score distribution of
    candidate m; it should be at least 100x the calibration size for the
    approximation to be trustworthy (a warning is raised otherwise).
    """
    if len(calib_scores) == 0 or len(reference_scores) != len(calib_scores):
        raise ValueError("need one non-empty reference sample per calibration sample")
    n_cal = len(calib_scores[0])
    n_ref = len(reference_scores[0])
    if n_ref < 100 * n_cal:
        warnings.warn("reference batch smaller than 100x calibration size; deviation estimate is noisy")
    best = (-1.0, 0, math.nan)
    for m, (cal, ref) in enumerate(zip(calib_scores, reference_scores)):
        stat, where = ks_two_sample(cal, ref)
        if stat > best[0]:
            best = (stat, m, where)
    return SupDeviationEstimate(
        value=best[0],
        argmax_index=best[1],
        argmax_t=best[2],
        num_candidates=len(calib_scores),
        calib_size=n_cal,
        reference_size=n_ref,
    )


def sup_deviation_for_replication(
    spec: ExperimentSpec, rep_index: int, reference_factor: int = 100
) -> SupDeviationEstimate:
    """Deviation estimate over the tuner's own search family for one replication.

    Supported families: the candidate maps of a ``SelectionTuner`` and a
    64-point log-spaced temperature grid for a ``TemperatureTuner``.
    """
    base = spec.base_seed
    cal = generate_classification(spec.data, spec.distortion, spec.n_cal, derive_key(base, rep_index, "cal"))
    n_ref = reference_factor * spec.n_cal
    ref = generate_classification(spec.data, spec.distortion, n_ref, derive_key(base, rep_index, "ref"))
    cal_ids = np.arange(spec.n_cal)
    ref_ids = _TEST_ID_BASE + np.arange(n_ref)
    u_policy = UPolicy("seeded", seed=derive_key(base, rep_index, "u"))

    if isinstance(spec.tuner, SelectionTuner):
        family_key = derive_key(spec.base_seed, "selection_family")
        candidates = _selection_candidates(spec.tuner, spec.data.num_classes, family_key, u_policy)
        cal_scores = [c.true_scores(cal.model_logits, cal.labels, cal_ids) for c in candidates]
        ref_scores = [c.true_scores(ref.model_logits, ref.labels, ref_ids) for c in candidates]
    elif isinstance(spec.tuner, TemperatureTuner):
        from .transforms import TempScale

        temperatures = np.exp(np.linspace(-6.0, 6.0, 64))
        cal_scores, ref_scores = [], []
        for temp in temperatures:
            scorer = Scorer(spec.score, TempScale(float(temp)), u_policy)
            cal_scores.append(scorer.true_scores(cal.model_logits, cal.labels, cal_ids))
            ref_scores.append(scorer.true_scores(ref.model_logits, ref.labels, ref_ids))
    else:
        raise ValueError("sup-deviation grids are defined for selection and temperature tuners")
    return estimate_sup_deviation(cal_scores, ref_scores)


# ---------------------------------------------------------------------------
# DKW verifier


def dkw_violation_rate(n: int, epsilon: float, trials: int, seed: int) -> tuple[float, float]:
    """Fraction of trials where sup_x |F_n - F| > epsilon, and the DKW bound.

    Samples are uniform so the true CDF is known exactly; the sup is the
    classical max over order statistics.  The bound is 2 exp(-2 n eps^2).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if n < 1 or trials < 1:
        raise ValueError("n and trials must be at least 1")
    rng = substream(seed, "dkw")
    grid_hi = np.arange(1, n + 1) / n
    grid_lo = np.arange(0, n) / n
    violations = 0
    chunk = max(1, min(trials, 10_000_000 // max(n, 1)))
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        u = np.sort(rng.random((m, n)), axis=1)
        sup = np.maximum(grid_hi[None, :] - u, u - grid_lo[None, :]).max(axis=1)
        violations += int((sup > epsilon).sum())
        done += m
    bound = 2.0 * math.exp(-2.0 * n * epsilon**2)
    return violations / trials, bound


# ---------------------------------------------------------------------------
# trend test


@dataclass(frozen=True)
class TrendTest:
    rho: float
    p_positive: float  # P(rho_perm >= rho_observed) under the permutation null
    p_negative: float  # P(rho_perm <= rho_observed)


def _rank(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    ranks[order] = np.arange(1, len(values) + 1)
    return ranks


def spearman_trend(x: np.ndarray, y: np.ndarray) -> TrendTest:
    """Spearman correlation with exact one-sided permutation p-values.

    Intended for small sweeps (at most 8 cells), where the full permutation
    null is enumerable and normal approximations are meaningless.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be equal-length vectors")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 points for a trend test")
    if n > 8:
        raise ValueError("exact permutation test supports up to 8 points")
    rx = _rank(x)
    ry = _rank(y)

    def rho_of(r1, r2):
        c = np.corrcoef(r1, r2)[0, 1]
        return float(c)

    observed = rho_of(rx, ry)
    count_ge = 0
    count_le = 0
    total = 0
    for perm in permutations(range(n)):
        rho = rho_of(rx, ry[list(perm)])
        count_ge += rho >= observed - 1e-12
        count_le += rho <= observed + 1e-12
        total += 1
    return TrendTest(rho=observed, p_positive=count_ge / total, p_negative=count_le / total)


# ---------------------------------------------------------------------------
# bound joins and CSV rows


def family_cardinality(tuner: Tuner) -> int | None:
    """Candidate-family size for finite tuners; None for continuous ones."""
    if isinstance(tuner, GridScoreTuner):
        return 41  # 30 coarse + 11 fine penalty grid points, rank offset fixed
    if isinstance(tuner, SelectionTuner):
        return tuner.num_candidates
    if isinstance(tuner, AggregationTuner):
        return aggregation_grid(tuner.step, 3).shape[0]
    return None


def continuous_dim(tuner: Tuner, num_classes: int) -> int | None:
    """Parameter dimension for continuous tuners; None for finite ones."""
    if isinstance(tuner, TemperatureTuner):
        return 1
    if isinstance(tuner, VectorScaleTuner):
        return int(round(2 * num_classes * tuner.unfrozen_fraction))
    if isinstance(tuner, ConfTrTuner):
        return num_classes + 2 if tuner.order_preserving else num_classes * num_classes + num_classes
    return None


def bias_rows(
    experiment_id: str,
    tuner: Tuner,
    complexity,
    estimate: BiasEstimate,
    base_seed: int,
) -> list[dict]:
    """Per-replication and aggregate rows with the fixed CSV column set.

    Aggregate rows carry rep = -1.
    """
    rows = []
    name = tuner_name(tuner)
    for protocol, coverages, sizes in (
        ("same", estimate.coverages_same, estimate.avg_size_same),
        ("holdout", estimate.coverages_holdout, estimate.avg_size_holdout),
    ):
        for rep, cov in enumerate(coverages):
            rows.append(
                {
                    "experiment_id": experiment_id,
                    "protocol": protocol,
                    "tuner": name,
                    "n_cal": estimate.n_cal,
                    "complexity": complexity,
                    "rep": rep,
                    "coverage": float(cov),
                    "avg_size": "",
                    "covgap": coverage_gap(float(cov), estimate.alpha),
                    "seed": derive_key(base_seed, rep, "cal"),
                }
            )
        mean_cov = float(np.asarray(coverages).mean())
        rows.append(
            {
                "experiment_id": experiment_id,
                "protocol": protocol,
                "tuner": name,
                "n_cal": estimate.n_cal,
                "complexity": complexity,
                "rep": -1,
                "coverage": mean_cov,
                "avg_size": sizes,
                "covgap": coverage_gap(mean_cov, estimate.alpha),
                "seed": base_seed,
            }
        )
    return rows
