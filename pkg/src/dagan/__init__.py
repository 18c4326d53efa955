"""Dual attentive GAN for bi-temporal remote-sensing change detection."""

from .attention import CRM, MAFM
from .config import ExperimentConfig, ModelConfig, TrainConfig, DataConfig, profile
from .data import BiTemporalSample, DatasetManifest, make_synthetic_dataset, split_dataset, tile_pairs
from .discriminator import Discriminator
from .generator import ChangePrediction, DANet, count_parameters
from .metrics import ConfusionMatrix, accumulate, compute_all
from .trainer import poly_lr, run_experiment, train_step

__version__ = "0.1.0"

__all__ = [
    "CRM", "MAFM",
    "ExperimentConfig", "ModelConfig", "TrainConfig", "DataConfig", "profile",
    "BiTemporalSample", "DatasetManifest", "make_synthetic_dataset", "split_dataset", "tile_pairs",
    "Discriminator", "ChangePrediction", "DANet", "count_parameters",
    "ConfusionMatrix", "accumulate", "compute_all",
    "poly_lr", "run_experiment", "train_step",
]
