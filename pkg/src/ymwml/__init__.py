"""Reproducible NumPy implementation of an attention-augmented segmentation
network trained with a rate-weighted exponential loss.

Everything runs on a small reverse-mode autodiff core (`ymwml.tensor`) whose
operators live in a registry so each backward rule can be verified by finite
differences (`ymwml.gradcheck`).
"""

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    NonFiniteError,
    ShapeError,
    TapeError,
    YmwmlError,
)
from .loss import ClassWeights, WmeParams, compute_class_rates, wme_batch_loss, wme_pixel_loss
from .model import Model, ModelConfig, build_model, load_checkpoint, save_checkpoint, shape_report
from .optim import AdamState, PolySchedule, adam_step, poly_lr
from .tensor import Rng, Tape, Tensor, backward, no_grad, registered_ops

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ClassWeights",
    "ConfigError",
    "DataError",
    "FormatError",
    "Model",
    "ModelConfig",
    "NonFiniteError",
    "PolySchedule",
    "Rng",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "WmeParams",
    "YmwmlError",
    "adam_step",
    "backward",
    "build_model",
    "compute_class_rates",
    "load_checkpoint",
    "no_grad",
    "poly_lr",
    "registered_ops",
    "save_checkpoint",
    "shape_report",
    "wme_batch_loss",
    "wme_pixel_loss",
]
