"""A small numpy-only engine for the reconstruction autoencoder."""

from .layers import (
    Autoencoder,
    batch_to_images,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    LeakyReLU,
    Sigmoid,
    build_autoencoder,
    patches_to_batch,
)
from .gradcheck import GradCheckReport, gradient_check, check_operator
from .serialize import load_model, save_model
from .train import Adam, TrainConfig, TrainingLog, reconstruct, train_autoencoder

__all__ = [
    "Adam",
    "Autoencoder",
    "BatchNorm2d",
    "Conv2d",
    "ConvTranspose2d",
    "GradCheckReport",
    "LeakyReLU",
    "Sigmoid",
    "TrainConfig",
    "TrainingLog",
    "batch_to_images",
    "build_autoencoder",
    "check_operator",
    "gradient_check",
    "load_model",
    "patches_to_batch",
    "reconstruct",
    "save_model",
    "train_autoencoder",
]
