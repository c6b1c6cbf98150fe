"""Blind image-quality network with multi-scale windowed, channel and cross attention.

The package is self-contained: :mod:`msscanet.tensor` supplies a float64
reverse-mode autodiff core, on top of which the patch embedding, attention
blocks, dual-branch model, losses, FLOP accounting and the training/evaluation
harness are built.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, SynthSpec, generate_synthetic, load_manifest
from .estimator import MSSCANetRegressor
from .flops import flops_analytic, flops_measured
from .losses import LossWeights, total_loss
from .metrics import plcc, srocc
from .model import Model, ModelConfig, build_model, forward
from .tensor import Tensor, backward, grad_check
from .training import TrainSchedule, cross_dataset, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest", "LossWeights", "MSSCANetRegressor", "Model", "ModelConfig", "SynthSpec",
    "Tensor", "TrainSchedule", "backward", "build_model", "cross_dataset", "evaluate",
    "flops_analytic", "flops_measured", "forward", "generate_synthetic", "grad_check",
    "load_checkpoint", "load_manifest", "plcc", "save_checkpoint", "srocc", "total_loss", "train",
]
