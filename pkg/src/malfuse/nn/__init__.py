"""Minimal dense-tensor neural network engine (numpy, CPU, deterministic)."""

from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    LeakyReLU,
    Linear,
    MaxPool2d,
    Parameter,
    ReLU,
    Sequential,
    Softmax,
    build_from_descriptor,
    hwc,
    shape_chain,
)
from .losses import mse_loss, softmax_cross_entropy
from .optim import Adam, Sgd, TrainConfig, make_optimizer
from .checkpoint import (
    Checkpoint,
    checkpoint_from_model,
    dumps_checkpoint,
    load_checkpoint,
    loads_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .gradcheck import gradient_check

__all__ = [
    "Adam", "Sgd", "make_optimizer", "BatchNorm2d", "Checkpoint", "Conv2d", "ConvTranspose2d",
    "LeakyReLU", "Linear", "MaxPool2d", "Parameter", "ReLU", "Sequential",
    "Softmax", "TrainConfig", "build_from_descriptor", "checkpoint_from_model",
    "dumps_checkpoint", "gradient_check", "hwc", "load_checkpoint",
    "loads_checkpoint", "model_from_checkpoint", "mse_loss", "save_checkpoint",
    "shape_chain", "softmax_cross_entropy",
]
