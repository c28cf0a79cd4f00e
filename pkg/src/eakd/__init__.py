"""Entropy-weighted adaptive knowledge distillation on a small numpy autodiff engine."""

from .distill import (
    DistillConfig,
    EntropyPair,
    SampleWeights,
    cross_entropy,
    dkd_loss,
    entropy,
    kd_loss,
    reweighted_loss,
    sample_weights,
    weight_base,
    weight_ea,
    weight_interact,
    weight_inverted,
)
from .models import MlpSpec, forward, init_params, load_checkpoint, save_checkpoint
from .tensor import Graph, Tensor, backward
from .trainer import TrainConfig, TrainRecord, distill_student, evaluate, train_teacher

__version__ = "0.1.0"

__all__ = [
    "DistillConfig",
    "EntropyPair",
    "SampleWeights",
    "cross_entropy",
    "dkd_loss",
    "entropy",
    "kd_loss",
    "reweighted_loss",
    "sample_weights",
    "weight_base",
    "weight_ea",
    "weight_interact",
    "weight_inverted",
    "MlpSpec",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "Graph",
    "Tensor",
    "backward",
    "TrainConfig",
    "TrainRecord",
    "distill_student",
    "evaluate",
    "train_teacher",
]
