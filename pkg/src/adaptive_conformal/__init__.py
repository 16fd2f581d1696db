"""Prompt-adaptive conformal factuality for long-form and multiple-choice QA."""

__version__ = "0.1.0"

from .conformal import (
    AdaptiveConformalFactuality,
    CalibrationError,
    calibrate_longform,
    calibrate_mcqa,
    filter_test_longform,
    filtration,
    lac_score,
    load_predictor,
    longform_score,
    lower_conformal_threshold,
    predict_set_mcqa,
    transform_score,
    upper_conformal_quantile,
)
from .data import (
    ClaimRecord,
    DataError,
    LongFormRecord,
    McqaRecord,
    PipelineConfig,
    SplitSpec,
    parse_longform_dataset,
    parse_mcqa_dataset,
    split_dataset,
)
from .evaluation import (
    CoverageReport,
    PerformanceProfile,
    calibration_error,
    coverage_by_group,
    dolan_more,
    pr_auc,
    removed_fraction,
)
from .pca import PCAReducer, fit_pca, transform_pca
from .quantile import (
    ConstantQuantileRegressor,
    MLPQuantileRegressor,
    TrainConfig,
    pinball_loss,
    predict_tau,
    train_quantile_regressor,
)
