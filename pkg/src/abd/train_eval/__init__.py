"""Patient-level splits, fold training, prediction and the evaluation protocol."""

from .metrics import (FoldScores, Interval95, MetricsReport, auroc, evaluate, fp_offset_histogram,
                      lead_credit_relabel)
from .splits import SplitError, SplitPlan, make_splits
from .training import (PredictionError, TrainConfig, TrainingDiverged, evaluate_checkpoints, predict,
                       train_model)

__all__ = [
    "FoldScores", "Interval95", "MetricsReport", "PredictionError", "SplitError", "SplitPlan",
    "TrainConfig", "TrainingDiverged", "auroc", "evaluate", "evaluate_checkpoints",
    "fp_offset_histogram", "lead_credit_relabel", "make_splits", "predict", "train_model",
]
