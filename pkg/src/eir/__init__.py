"""Unsupervised feature embedding with instance-relation losses."""

from .augment import AugmentPolicy, InterpolationSpec
from .data import Dataset, SyntheticSpec, generate_synthetic
from .encoder import EncoderSpec
from .losses import LossConfig, LossReport
from .memory_bank import EmbeddingBank, init_bank
from .trainer import Checkpoint, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy",
    "Checkpoint",
    "Dataset",
    "EmbeddingBank",
    "EncoderSpec",
    "InterpolationSpec",
    "LossConfig",
    "LossReport",
    "SyntheticSpec",
    "TrainConfig",
    "generate_synthetic",
    "init_bank",
    "train",
]
