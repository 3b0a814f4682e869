"""Hyperspectral pixel classification with convolutional spatial features and
multi-scale latent attention over the spectral sequence."""

from .datapipe import (
    AugmentConfig,
    PatchSet,
    PcaModel,
    SpectralPCA,
    SplitSpec,
    apply_pca,
    augment,
    batch_iter,
    extract_patch,
    extract_patches,
    fit_pca,
    standardize,
    stratified_split,
)
from .estimator import CLAReSNetClassifier
from .model import CLAReSNet, ModelConfig, parameter_count, parameter_report
from .spectral import latent_count
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "PatchSet",
    "PcaModel",
    "SpectralPCA",
    "SplitSpec",
    "apply_pca",
    "augment",
    "batch_iter",
    "extract_patch",
    "extract_patches",
    "fit_pca",
    "standardize",
    "stratified_split",
    "CLAReSNetClassifier",
    "CLAReSNet",
    "ModelConfig",
    "parameter_count",
    "parameter_report",
    "latent_count",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
