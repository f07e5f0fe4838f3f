"""Mutual-information regularised person re-identification on synthetic data.

A small reverse-mode autodiff core drives global and part-based encoders,
discriminator-based Jensen-Shannon objectives, unsupervised transfer and
CMC/mAP evaluation.
"""
from .datasets import Dataset, DatasetSpec, DomainShift, load_dataset, save_dataset, synth_dataset
from .models import DimModel, ModelConfig, init_params
from .objectives import ObjectiveConfig, dim_loss, global_objective, jsd_estimate, local_objective
from .training import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    tf_dim,
    train_global_dim,
    train_local_dim,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "Dataset",
    "DatasetSpec",
    "DimModel",
    "DomainShift",
    "ModelConfig",
    "ObjectiveConfig",
    "TrainConfig",
    "dim_loss",
    "global_objective",
    "init_params",
    "jsd_estimate",
    "load_checkpoint",
    "load_dataset",
    "local_objective",
    "save_checkpoint",
    "save_dataset",
    "synth_dataset",
    "tf_dim",
    "train_global_dim",
    "train_local_dim",
]
