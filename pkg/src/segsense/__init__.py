"""Model-selection and sensitivity-analysis toolkit for binary segmentation.

Functionality is grouped the way a user meets it:

- ``segsense.masks``      binary mask data model, loading, preprocessing, splits
- ``segsense.metrics``    overlap/error indices between ground-truth and predicted masks
- ``segsense.fitting``    saturation-curve and scaling-surface fits over sweep output
- ``segsense.estimators`` scikit-learn estimator wrappers around the fitting core
- ``segsense.harness``    training-set-size sweeps, repeated trials, predictors
- ``segsense.volumes``    longitudinal volume quantification from mask stacks
- ``segsense.report``     figure-ready tables, model recommendation
- ``segsense.cli``        the ``segsense`` command
"""

__version__ = "0.1.0"

from segsense.masks import (
    DatasetSplit,
    GrayImage,
    Mask,
    MaskStack,
    filter_informative,
    foreground_count,
    load_mask,
    load_stack,
    partition,
    resize_mask,
    to_binary,
)
from segsense.metrics import (
    ConfusionCounts,
    MetricConfig,
    MetricRecord,
    batch_mean,
    bce_loss,
    confusion,
    dice,
    dice_loss,
    directed_hausdorff,
    evaluate_pair,
    f_score,
    hausdorff,
    iou,
    rmse,
)
from segsense.fitting import (
    DEFAULT_TRAIN_AXIS,
    ExpFit,
    GridAxis,
    SurfaceFit,
    Trace,
    eval_exponential,
    eval_surface,
    fit_exponential,
    fit_surface,
)
from segsense.estimators import ExponentialSaturationModel, ScalingSurfaceModel
from segsense.harness import (
    BoxStats,
    DegradationParams,
    PredictorSpec,
    SweepConfig,
    SweepResult,
    index_sensitivity_ranking,
    reproducibility_stats,
    run_sweep,
    synthetic_predict,
)
from segsense.volumes import (
    VolumeSample,
    VolumeSeries,
    modality_ratio,
    normalize_series,
    stack_volume,
)

__all__ = [
    "BoxStats",
    "ConfusionCounts",
    "DEFAULT_TRAIN_AXIS",
    "DatasetSplit",
    "DegradationParams",
    "ExpFit",
    "ExponentialSaturationModel",
    "GrayImage",
    "GridAxis",
    "Mask",
    "MaskStack",
    "MetricConfig",
    "MetricRecord",
    "PredictorSpec",
    "ScalingSurfaceModel",
    "SurfaceFit",
    "SweepConfig",
    "SweepResult",
    "Trace",
    "VolumeSample",
    "VolumeSeries",
    "batch_mean",
    "bce_loss",
    "confusion",
    "dice",
    "dice_loss",
    "directed_hausdorff",
    "eval_exponential",
    "eval_surface",
    "evaluate_pair",
    "f_score",
    "filter_informative",
    "fit_exponential",
    "fit_surface",
    "foreground_count",
    "hausdorff",
    "index_sensitivity_ranking",
    "iou",
    "load_mask",
    "load_stack",
    "modality_ratio",
    "normalize_series",
    "partition",
    "reproducibility_stats",
    "resize_mask",
    "rmse",
    "run_sweep",
    "stack_volume",
    "synthetic_predict",
    "to_binary",
]
