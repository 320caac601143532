"""Adversarial meta-learning for real/fake image classification.

Reptile meta-training with a refinement phase that ranks support samples,
synthesizes augmented and adversarial copies, and trains on a weighted
unified loss.
"""
from .data import MetaDataset, ToyGenSpec, build_toy_metadataset, load_manifest, sample_task
from .errors import (CapabilityError, EpisodeError, FormatError, MetaForgeError, NumericError, ShapeError,
                     TrainingError, ValidationError)
from .evaluation import MetricsReport, SweepTable, compute_metrics, cross_dataset_eval, sweep
from .model import ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, few_shot_adapt, meta_train, train_conventional

__version__ = "0.1.0"

__all__ = [
    "CapabilityError", "EpisodeError", "FormatError", "MetaDataset", "MetaForgeError", "MetricsReport",
    "ModelParams", "NumericError", "ShapeError", "SweepTable", "ToyGenSpec", "TrainConfig", "TrainingError",
    "ValidationError", "build_toy_metadataset", "compute_metrics", "cross_dataset_eval", "few_shot_adapt",
    "forward", "init_params", "load_checkpoint", "load_manifest", "meta_train", "sample_task",
    "save_checkpoint", "sweep", "train_conventional",
]
