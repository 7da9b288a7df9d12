"""Two-stage infrared small-target segmentation on synthetic scenes.

A routed adapter of four image-processing experts, inserted into a frozen
vision transformer, is trained on a small labeled subset. Its masks then
supervise a compact convolutional student on the unlabeled remainder.
"""
from .checkpoint import Checkpoint
from .data import Manifest, SceneParams, generate_dataset, generate_scene, make_splits
from .errors import (ConfigurationError, ContractError, DimensionError, FormatError, IrDistillError,
                     NonFiniteError)
from .metrics import MetricsReport, segmentation_metrics
from .pipeline import (TrainConfig, evaluate_model, generate_pseudo_labels, run_ablation, run_paradigm,
                       train_student, train_teacher)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigurationError", "ContractError", "DimensionError", "FormatError", "IrDistillError",
    "Manifest", "MetricsReport", "NonFiniteError", "SceneParams", "TrainConfig", "evaluate_model",
    "generate_dataset", "generate_pseudo_labels", "generate_scene", "make_splits", "run_ablation",
    "run_paradigm", "segmentation_metrics", "train_student", "train_teacher",
]
