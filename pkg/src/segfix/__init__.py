"""Fixation backtracking and template-similarity fine-tuning for small segmentation CNNs."""

from .errors import ModelFormatError, NumericalError, ShapeError, ValidationError
from .fixations import (
    FixationPoint,
    FixationSet,
    KStrategy,
    ShiftPolicy,
    backtrack,
    seed_classification,
    seed_segmentation,
)
from .losses import LossConfig, combined_loss, similarity, softmax_xent, template_loss
from .modelio import load_model, save_model
from .network import ActivationRecord, LayerSpec, Network, backward, forward, predict_segmentation
from .tensor import ConvParams, FCParams, PoolParams

__version__ = "0.1.0"
