"""Pixel mask generation and the gather/scatter sparse 3x3 convolution.

A mask network (one 3x3 conv collapsing channels to a single logit map)
decides per pixel whether the head computes there. During training the
decision is a thresholded gumbel-sigmoid with a straight-through gradient;
at inference it is simply ``logits > 0``. The sparse convolution evaluates
outputs only at active pixels, reading the full (dense) 3x3 input
neighborhood, and zero-fills everything else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff, kernels
from .autodiff import Tensor
from .dtypes import as_default, default_dtype
from .errors import ContractViolation
from .kernels import ConvWeights
from .ledger import FlopLedger


@dataclass
class GumbelNoise:
    """Two independent gumbel fields, -log(-log(u)) with u in (0, 1)."""

    g1: np.ndarray
    g2: np.ndarray
    seed: int


def sample_gumbel_noise(shape: tuple[int, ...], seed: int) -> GumbelNoise:
    rng = np.random.default_rng(seed)
    return GumbelNoise(_gumbel(rng, shape), _gumbel(rng, shape), seed)


def gumbel_from_rng(shape: tuple[int, ...], rng: np.random.Generator, seed: int = -1) -> GumbelNoise:
    return GumbelNoise(_gumbel(rng, shape), _gumbel(rng, shape), seed)


def _gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    tiny = np.nextafter(0.0, 1.0)
    u = rng.uniform(tiny, 1.0, size=shape)
    return (-np.log(-np.log(u))).astype(default_dtype())


@dataclass
class SoftMask:
    """Pre-threshold mask logits, one channel, same spatial size as the source."""

    logits: np.ndarray | Tensor

    def __post_init__(self):
        shape = self.logits.data.shape if isinstance(self.logits, Tensor) else self.logits.shape
        if len(shape) != 4 or shape[1] != 1:
            raise ContractViolation(f"mask logits must have shape (B,1,H,W), got {shape}")

    @property
    def values(self) -> np.ndarray:
        return self.logits.data if isinstance(self.logits, Tensor) else self.logits


class HardMask:
    """Binary per-pixel decisions plus (in training) the soft surrogates.

    ``soft`` is the gumbel-sigmoid relaxation that carries the
    straight-through gradient for masked features. ``ratio_soft``, when
    present, is a sharper noiseless relaxation used as the differentiable
    activation-count estimator; without the sharpening, the count the ratio
    objective drives would not match the deployed (noise-free) mask.
    """

    def __init__(self, decisions: np.ndarray, soft: Tensor | np.ndarray | None = None,
                 ratio_soft: Tensor | None = None):
        if decisions.ndim != 4 or decisions.shape[1] != 1:
            raise ContractViolation(f"decisions must have shape (B,1,H,W), got {decisions.shape}")
        self.decisions = decisions.astype(bool)
        self.soft = soft
        self.ratio_soft = ratio_soft
        self._active: np.ndarray | None = None

    @property
    def active_set(self) -> np.ndarray:
        """Active positions as an ``(n, 3)`` array of (b, y, x), lexicographic."""
        if self._active is None:
            self._active = np.argwhere(self.decisions[:, 0])
        return self._active

    @property
    def num_active(self) -> int:
        return len(self.active_set)

    def as_float(self) -> np.ndarray:
        return self.decisions.astype(default_dtype())

    def straight_through(self) -> Tensor:
        """0/1 forward values whose gradient is the soft surrogate's."""
        if not isinstance(self.soft, Tensor):
            raise ContractViolation("straight-through mask requires a training-mode surrogate")
        hard = self.decisions.astype(self.soft.data.dtype)
        return self.soft + Tensor(hard - self.soft.data)

    def soft_ratio(self) -> Tensor | None:
        """Differentiable activation-ratio companion (mean of a surrogate).

        Prefers the sharp count estimator when the mask carries one.
        """
        if self.ratio_soft is not None:
            return self.ratio_soft.mean()
        if self.soft is None:
            return None
        soft = self.soft if isinstance(self.soft, Tensor) else Tensor(self.soft)
        return soft.mean()


def mask_logits(x: np.ndarray, w_mask: ConvWeights) -> SoftMask:
    """Run the mask network: a shared 3x3 kernel collapsing C channels to 1."""
    if w_mask.out_channels != 1 or (w_mask.kernel_h, w_mask.kernel_w) != (3, 3):
        raise ContractViolation(
            f"mask kernel must be (1, C, 3, 3), got {w_mask.weight.shape}"
        )
    return SoftMask(kernels.conv2d(x, w_mask, padding=1))


def train_mask(s: SoftMask | Tensor, noise: GumbelNoise, tau: float = 1.0,
               ratio_tau: float | None = None) -> HardMask:
    """Training-branch mask: threshold a gumbel-sigmoid relaxation at 0.5.

    The returned mask keeps the soft surrogate so gradients can flow through
    the hard decisions (straight-through). With ``ratio_tau`` set, a
    noiseless sigmoid of the logits at that sharper temperature is attached
    as the activation-count estimator for the ratio objective.
    """
    if tau <= 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    if ratio_tau is not None and ratio_tau <= 0:
        raise ContractViolation(f"ratio temperature must be positive, got {ratio_tau}")
    logits = s.logits if isinstance(s, SoftMask) else s
    shift = noise.g1 - noise.g2
    if isinstance(logits, Tensor):
        if shift.shape != logits.data.shape:
            raise ContractViolation("noise shape does not match logits")
        soft = ((logits + Tensor(shift.astype(logits.data.dtype))) * (1.0 / tau)).sigmoid()
        ratio_soft = (logits * (1.0 / ratio_tau)).sigmoid() if ratio_tau is not None else None
        return HardMask(soft.data > 0.5, soft, ratio_soft)
    if shift.shape != logits.shape:
        raise ContractViolation("noise shape does not match logits")
    soft = kernels.sigmoid((logits + shift.astype(logits.dtype)) / tau)
    return HardMask(soft > 0.5, soft)


def infer_mask(s: SoftMask | np.ndarray) -> HardMask:
    """Inference-branch mask: strictly positive logits are active, no surrogate."""
    logits = s.values if isinstance(s, SoftMask) else s
    return HardMask(logits > 0)


def sparse_conv3x3(x: np.ndarray, w: ConvWeights, mask: HardMask,
                   ledger: FlopLedger | None = None,
                   level: int = 0, branch: str = "", layer: str = "") -> np.ndarray:
    """3x3 convolution evaluated only at mask-active output pixels.

    Active outputs read the full 3x3 input neighborhood (zero padded at the
    border) regardless of neighbor mask state; inactive outputs are zero.
    MACs = n_active * 9 * C_in * C_out are recorded into ``ledger``.
    """
    kernels.check_feature_map(x)
    b, c, h, wd = x.shape
    if w.in_channels != c:
        raise ContractViolation(f"kernel expects {w.in_channels} channels, got {c}")
    if (w.kernel_h, w.kernel_w) != (3, 3):
        raise ContractViolation(f"sparse conv supports 3x3 kernels only, got {w.kernel_h}x{w.kernel_w}")
    if mask.decisions.shape != (b, 1, h, wd):
        raise ContractViolation(
            f"mask shape {mask.decisions.shape} does not match feature map {(b, 1, h, wd)}"
        )

    o = w.out_channels
    out = np.zeros((b, o, h, wd), dtype=x.dtype)
    active = mask.active_set
    n = len(active)
    if ledger is not None:
        ledger.add_conv(n * 9 * c * o, level, branch, layer)
    if n == 0:
        return out

    bb, yy, xx = active[:, 0], active[:, 1], active[:, 2]
    xp = kernels.pad1(x)
    offs = np.arange(3)
    # advanced indexing yields (n, 3, 3, C); reorder to the im2col column layout
    patches = xp[bb[:, None, None], :, (yy[:, None] + offs)[:, :, None], (xx[:, None] + offs)[:, None, :]]
    rows = patches.transpose(0, 3, 1, 2).reshape(n, c * 9)
    values = rows @ w.weight.reshape(o, -1).T
    if w.bias is not None:
        values = values + w.bias
    out[bb, :, yy, xx] = values
    return out


def active_ratio(mask: HardMask) -> float:
    """Fraction of pixels computed: |active| / (B*H*W).

    The differentiable training-mode companion (mean of the soft surrogate,
    which carries the gradient) is available as ``mask.soft_ratio()``.
    """
    b, _, h, w = mask.decisions.shape
    return mask.num_active / float(b * h * w)


def dump_mask(mask: HardMask) -> np.ndarray:
    """Mask as a 0.0/1.0 rank-4 tensor for the binary dump format."""
    return as_default(mask.decisions)
