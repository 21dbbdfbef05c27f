"""Split conformal prediction with parameter tuning on reused calibration data.

Subpackages by concern:

* :mod:`cpbias.synth`       synthetic classification/regression populations
* :mod:`cpbias.scores`      THR/APS/RAPS/SAPS non-conformity scores
* :mod:`cpbias.transforms`  logit calibration maps and order preservation
* :mod:`cpbias.conformal`   quantiles, thresholds, sets, coverage metrics
* :mod:`cpbias.tuners`      temperature/vector/matrix fitting, grid searches
* :mod:`cpbias.harness`     paired same-set vs hold-out bias experiments
* :mod:`cpbias.bounds`      closed-form bias upper bounds
* :mod:`cpbias.cqr`         conformalized quantile regression experiments
* :mod:`cpbias.cli`         config-driven command line runner
"""

from .bounds import (
    BoundReport,
    finite_family_bound,
    raps_bound,
    selection_bound,
    vc_bound,
)
from .conformal import (
    CoverageReport,
    conformal_threshold,
    coverage_gap,
    coverage_slack,
    empirical_quantile,
    evaluate_sets,
    prediction_set,
)
from .harness import (
    AggregationTuner,
    BiasEstimate,
    ConfTrTuner,
    ExperimentSpec,
    GridScoreTuner,
    HoldOut,
    IdentityTuner,
    SameSet,
    SelectionTuner,
    TemperatureTuner,
    VectorScaleTuner,
    dkw_violation_rate,
    estimate_sup_deviation,
    estimate_tuning_bias,
    ks_two_sample,
    run_replication,
    spearman_trend,
    sweep_calibration_size,
    sweep_complexity,
)
from .scores import (
    ScoreSpec,
    Scorer,
    UPolicy,
    aps_score,
    label_rank,
    raps_score,
    saps_score,
    softmax,
    thr_score,
)
from .synth import (
    ClassificationBatch,
    Distortion,
    GaussMixSpec,
    RegressionSpec,
    generate_classification,
    generate_regression,
    true_posterior,
)
from .transforms import (
    Identity,
    MatrixScale,
    RankOneAffineScale,
    ScalarAffineScale,
    TempScale,
    VectorScale,
    apply_transform,
    is_order_preserving,
)
from .tuners import (
    TunerResult,
    aggregation_grid,
    fit_aggregation,
    fit_conftr_linear,
    fit_raps_params,
    fit_temperature,
    fit_vector_scale,
    freeze_mask_random,
    nll,
    select_score,
)

__version__ = "0.1.0"
