"""Training loop, metrics, TTA prediction and checkpoints."""

from .checkpoint import CheckpointFormatError, load_checkpoint, read_checkpoint, save_checkpoint
from .metrics import auc_score, classification_metrics, confusion_counts, segmentation_metrics, summarize
from .optim import Adam, linear_lr
from .train import (
    StepResult,
    TrainConfig,
    TrainingDiverged,
    desk_config,
    evaluate,
    predict,
    train,
    train_step,
    tta_predict,
)

__all__ = [
    "Adam", "CheckpointFormatError", "StepResult", "TrainConfig", "TrainingDiverged",
    "auc_score", "classification_metrics", "confusion_counts", "desk_config", "evaluate",
    "linear_lr", "load_checkpoint", "predict", "read_checkpoint", "save_checkpoint",
    "segmentation_metrics", "summarize", "train", "train_step", "tta_predict",
]
