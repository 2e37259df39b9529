"""Gammatone front end and a compact SE-residual CNN for acoustic scene classification."""

from .dsp import FeatureMatrix, FrontendConfig, NormStats, gammatonegram
from .modelio import ModelArtifact, fold_batchnorm, quantize_binary16, size_report
from .nn import ASCNet, ModelSpec, focal_loss
from .train import PlateauScheduler, TrainConfig

__all__ = [
    "ASCNet", "FeatureMatrix", "FrontendConfig", "ModelArtifact", "ModelSpec", "NormStats",
    "PlateauScheduler", "TrainConfig", "focal_loss", "fold_batchnorm", "gammatonegram",
    "quantize_binary16", "size_report",
]
__version__ = "0.1.0"
