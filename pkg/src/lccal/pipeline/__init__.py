"""Training, multi-range refinement, temporal filtering and evaluation."""

from .cascade import (CalibrationEstimate, CascadeConfig, CascadeStage, FixedStage, ModelStage,
                      OracleStage, refine_cascade)
from .filtering import sliding_filter, temporal_filter
from .metrics import COLUMNS, ErrorReport, aggregate, evaluate, write_error_csv
from .training import TrainOptions, TrainResult, evaluate_batch_loss, make_batch, train_range

__all__ = [
    "CalibrationEstimate", "CascadeConfig", "CascadeStage", "FixedStage", "ModelStage", "OracleStage",
    "refine_cascade", "sliding_filter", "temporal_filter", "COLUMNS", "ErrorReport", "aggregate",
    "evaluate", "write_error_csv", "TrainOptions", "TrainResult", "evaluate_batch_loss", "make_batch",
    "train_range",
]
