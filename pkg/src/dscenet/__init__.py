"""Multimodal bag classification with dynamic patch screening and
clinical-guided cross-attention fusion, built on a small reverse-mode
autodiff core."""

from .data import (
    CLASS_NAMES,
    DatasetManifest,
    FeatureBag,
    GenConfig,
    generate_synthetic,
    read_bag,
    stratified_split,
    write_bag,
)
from .metrics import MetricsReport, auc, report, roc_curve
from .model import ModelConfig, ModelParams, Variant, forward, load_checkpoint, save_checkpoint
from .numerics import Matrix, backward, grad_check
from .training import AdamState, TrainConfig, adam_step, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "AdamState",
    "DatasetManifest",
    "FeatureBag",
    "GenConfig",
    "Matrix",
    "MetricsReport",
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "Variant",
    "adam_step",
    "auc",
    "backward",
    "evaluate",
    "forward",
    "generate_synthetic",
    "grad_check",
    "load_checkpoint",
    "read_bag",
    "report",
    "roc_curve",
    "save_checkpoint",
    "stratified_split",
    "train",
    "write_bag",
]
