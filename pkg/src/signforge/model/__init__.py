"""Classifiers and their (adversarial) training procedures."""

from signforge.model.nets import ARCHITECTURES, Classifier, build_model, n_parameters
from signforge.model.train import (
    AdversarialTrainer,
    RenderSource,
    TensorSource,
    TrainConfig,
    TrainingError,
    config_hash,
    doa_from_scratch,
    evaluate_benign,
    load_checkpoint,
    save_checkpoint,
    train_doa,
    train_fraction,
    train_standard,
)

__all__ = [
    "ARCHITECTURES",
    "AdversarialTrainer",
    "Classifier",
    "RenderSource",
    "TensorSource",
    "TrainConfig",
    "TrainingError",
    "build_model",
    "config_hash",
    "doa_from_scratch",
    "evaluate_benign",
    "load_checkpoint",
    "n_parameters",
    "save_checkpoint",
    "train_doa",
    "train_fraction",
    "train_standard",
]
