"""Dense numpy kernels: convolution, activations and grouped statistics.

These are the plain (tape-free) reference implementations. Inference runs on
them directly; the autodiff layer in :mod:`sparsehead.autodiff` wraps the same
routines and adds backward passes.

Feature maps are rank-4 ``(batch, channels, height, width)`` arrays, row-major.
Only the two kernel geometries the head actually uses are implemented:
3x3 / padding 1 / stride 1 and 1x1 / padding 0 / stride 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dtypes import EPS
from .errors import ContractViolation, UnsupportedConfig


@dataclass
class ConvWeights:
    """Convolution kernel plus optional per-output-channel bias.

    ``weight`` has shape ``(out_channels, in_channels, kh, kw)``.
    """

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ContractViolation(f"weight must be rank-4, got shape {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ContractViolation(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weight.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weight.shape[3]


def check_feature_map(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ContractViolation(f"feature map must be rank-4 (B,C,H,W), got shape {x.shape}")
    return x


def _check_conv_config(x: np.ndarray, w: ConvWeights, padding: int, stride: int) -> None:
    check_feature_map(x)
    if w.in_channels != x.shape[1]:
        raise ContractViolation(
            f"kernel expects {w.in_channels} input channels, feature map has {x.shape[1]}"
        )
    geometry = (w.kernel_h, w.kernel_w, padding, stride)
    if geometry not in ((3, 3, 1, 1), (1, 1, 0, 1)):
        raise UnsupportedConfig(
            f"unsupported conv geometry kernel={w.kernel_h}x{w.kernel_w} "
            f"padding={padding} stride={stride}; only 3x3/pad1/stride1 and 1x1/pad0/stride1"
        )


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """Unfold 3x3 neighborhoods (zero padded) into a ``(B*H*W, C*9)`` matrix.

    Column order is channel-major then kernel row/col, matching
    ``weight.reshape(out, in*9)``.
    """
    b, c, h, w = x.shape
    xp = pad1(x)
    cols = np.empty((b, c, 3, 3, h, w), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = xp[:, :, ky : ky + h, kx : kx + w]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * h * w, c * 9)


def pad1(x: np.ndarray) -> np.ndarray:
    """Zero-pad the two spatial dims by one (cheaper than np.pad)."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1 : h + 1, 1 : w + 1] = x
    return xp


def col2im3x3(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of :func:`im2col3x3`: scatter-add columns back onto the grid."""
    b, c, h, w = shape
    g = cols.reshape(b, h, w, c, 3, 3)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            xp[:, :, ky : ky + h, kx : kx + w] += g[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return xp[:, :, 1 : h + 1, 1 : w + 1]


def conv2d(x: np.ndarray, w: ConvWeights, padding: int = 1, stride: int = 1) -> np.ndarray:
    """Dense 2-d convolution (cross-correlation) with zero padding."""
    _check_conv_config(x, w, padding, stride)
    b, c, h, wd = x.shape
    o = w.out_channels
    if w.kernel_h == 1:
        y = np.tensordot(x, w.weight[:, :, 0, 0], axes=([1], [1]))  # (B,H,W,O)
    else:
        cols = im2col3x3(x)
        y = (cols @ w.weight.reshape(o, -1).T).reshape(b, h, wd, o)
    if w.bias is not None:
        y = y + w.bias
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def pointwise_conv(x: np.ndarray, w: ConvWeights) -> np.ndarray:
    """1x1 convolution: a per-pixel linear mix of channels."""
    if (w.kernel_h, w.kernel_w) != (1, 1):
        raise UnsupportedConfig(f"pointwise_conv needs a 1x1 kernel, got {w.kernel_h}x{w.kernel_w}")
    return conv2d(x, w, padding=0, stride=1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable piecewise form; never exponentiates a large positive value.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


def group_stats(x: np.ndarray, num_groups: int, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per (batch, group) mean and epsilon-guarded standard deviation.

    Statistics pool each group's channels over all spatial positions; the
    variance is the population (biased) one, with ``eps`` added before sqrt.
    Returns two ``(B, num_groups)`` arrays.
    """
    check_feature_map(x)
    b, c = x.shape[:2]
    if c % num_groups != 0:
        raise ContractViolation(f"{c} channels not divisible into {num_groups} groups")
    g = x.reshape(b, num_groups, -1)
    mean = g.mean(axis=2)
    var = ((g - mean[:, :, None]) ** 2).mean(axis=2)
    return mean, np.sqrt(var + np.asarray(eps, dtype=x.dtype))
