"""Sparse-convolution detection-head engine.

A desk-scale head that computes convolutions only at mask-selected pixels,
normalizes sparse activations against global-context statistics, and trains
its mask ratio per pyramid level toward the ground-truth foreground
fraction. Ships with a synthetic-scene training harness and FLOP/latency
benchmarks comparing sparse against dense execution.
"""

from .autodiff import Tensor, backward, grad_check
from .dtypes import precision, set_default_dtype
from .head import DetectionHead, GtScene, HeadConfig, assign_labels
from .kernels import ConvWeights, conv2d, group_stats, pointwise_conv
from .ledger import FlopLedger
from .losses import LevelLabels, LossWeights, RatioMode
from .masking import HardMask, SoftMask, active_ratio, infer_mask, sparse_conv3x3, train_mask

__all__ = [
    "Tensor", "backward", "grad_check", "precision", "set_default_dtype",
    "DetectionHead", "GtScene", "HeadConfig", "assign_labels",
    "ConvWeights", "conv2d", "group_stats", "pointwise_conv",
    "FlopLedger", "LevelLabels", "LossWeights", "RatioMode",
    "HardMask", "SoftMask", "active_ratio", "infer_mask", "sparse_conv3x3", "train_mask",
]

__version__ = "0.1.0"
