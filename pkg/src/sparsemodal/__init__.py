"""Multimodal emotion classification with attention-gated sparse CNNs."""

from sparsemodal.config import ModelConfig
from sparsemodal.estimator import MultimodalEmotionClassifier
from sparsemodal.metrics import ConfusionCounts, binary_f1, weighted_accuracy
from sparsemodal.model import DataSpec, Network
from sparsemodal.signal import ModalitySample, synth_sample
from sparsemodal.sparse import FlopsLedger, SparseFeatureMap, flops_report
from sparsemodal.tensor import (
    Adam,
    NumericFailure,
    ParamStore,
    ShapeMismatch,
    Tensor,
    grad_check,
    tensor,
)

__all__ = [
    "Adam",
    "ConfusionCounts",
    "DataSpec",
    "FlopsLedger",
    "ModalitySample",
    "ModelConfig",
    "MultimodalEmotionClassifier",
    "Network",
    "NumericFailure",
    "ParamStore",
    "ShapeMismatch",
    "SparseFeatureMap",
    "Tensor",
    "binary_f1",
    "flops_report",
    "grad_check",
    "synth_sample",
    "tensor",
    "weighted_accuracy",
]

__version__ = "0.1.0"
