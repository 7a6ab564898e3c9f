"""Decomposed spatiotemporal convolutions for binary precipitation nowcasting.

A NumPy implementation of a U-Net built from large-context aggregation
blocks with a spatiotemporal refinement head, trained by a small
tape-based reverse-mode autodiff engine.
"""

from .conv import ConvSpec, conv3d_forward, flops_decomposed, flops_full
from .estimator import SIANetClassifier
from .metrics import MetricsRecord, binarize_and_score, mean_iou
from .model import ModelConfig, build, count_model_flops, forward, load_checkpoint, predict_logits, save_checkpoint
from .training import TrainConfig, total_loss, train_loop

__version__ = "0.1.0"

__all__ = [
    "ConvSpec",
    "MetricsRecord",
    "ModelConfig",
    "SIANetClassifier",
    "TrainConfig",
    "binarize_and_score",
    "build",
    "conv3d_forward",
    "count_model_flops",
    "flops_decomposed",
    "flops_full",
    "forward",
    "load_checkpoint",
    "mean_iou",
    "predict_logits",
    "save_checkpoint",
    "total_loss",
    "train_loop",
]
