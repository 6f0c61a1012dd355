"""Desk-scale two-stage distillation of masked-autoencoder vision transformers."""

from g2sd.analysis import linear_cka, occlusion_curve
from g2sd.data import synth_dataset
from g2sd.estimators import (
    GenericDistiller,
    MaePretrainer,
    TrainingDiverged,
    ViTClassifier,
)
from g2sd.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    no_grad,
    tape,
)

__version__ = "0.1.0"

__all__ = [
    "GenericDistiller",
    "MaePretrainer",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainingDiverged",
    "ViTClassifier",
    "linear_cka",
    "no_grad",
    "occlusion_curve",
    "synth_dataset",
    "tape",
    "__version__",
]
