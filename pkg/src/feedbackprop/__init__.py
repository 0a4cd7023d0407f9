"""Feedback-prop inference: refine interior activations from partially known labels."""

from .autograd import Tape, backward_to, forward_from, forward_full, grad_check
from .errors import FeedbackPropError
from .feedback import (
    Adam,
    FeedbackConfig,
    FeedbackTrace,
    Momentum,
    ResidualSet,
    SGD,
    layer_wise_feedback,
    residual_feedback,
    single_layer_feedback,
    update_step,
)
from .losses import ClassWeights, EvidencePartition, class_weights, partial_loss, weighted_bce
from .metrics import average_precision, mean_ap, multiclass_accuracy
from .model import LayerSpec, Model, build_model, load_model, pivot_set, reference_layers, save_model
from .tensor import Tensor, activation, conv2d, matmul, reduce, tensor_create

__version__ = "0.1.0"
