"""One sparse head layer: conv, normalization against global statistics,
residual context, and the training-time dense shadow path.

The layer's normalizer draws its mean/std from a global context feature
(a pointwise projection of the level's input map) instead of from the
sparsely computed activations, which keeps the sparse cascade distributed
like the dense one. Ablation normalizers (plain group/batch/instance norm
computed over the active pixels, or none) are selectable per layer.

Training runs on the autodiff tape with the mask applied as a multiplier
(values identical to true sparse execution); inference runs a fused numpy
path that only touches active rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff, kernels, masking
from .autodiff import Tensor
from .dtypes import EPS, default_dtype
from .errors import ContractViolation, ModeViolation
from .kernels import ConvWeights
from .ledger import FlopLedger
from .masking import HardMask

NORMALIZERS = ("context_gn", "group_norm", "batch_norm", "instance_norm", "none")
INACTIVE_FILLS = ("context", "zero")


class SparseConvLayer:
    """Parameters and state for one conv + norm + residual + relu block.

    The conv weights are shared by the sparse path and the training-time
    dense shadow path. ``scale`` and ``shift`` are the per-channel affine
    of the normalizer; batch-norm ablation state (running stats updated
    from the dense path with momentum 0.1) lives here too.
    """

    def __init__(self, conv_w: Tensor, conv_b: Tensor, scale: Tensor, shift: Tensor,
                 num_groups: int, normalizer: str = "context_gn",
                 inactive_fill: str = "context"):
        channels = conv_w.data.shape[0]
        if normalizer not in NORMALIZERS:
            raise ContractViolation(f"unknown normalizer {normalizer!r}, expected one of {NORMALIZERS}")
        if inactive_fill not in INACTIVE_FILLS:
            raise ContractViolation(f"unknown inactive fill {inactive_fill!r}")
        if scale.data.shape != (1, channels, 1, 1) or shift.data.shape != (1, channels, 1, 1):
            raise ContractViolation("scale/shift must have shape (1, C, 1, 1)")
        if channels % num_groups != 0:
            raise ContractViolation(f"{channels} channels not divisible into {num_groups} groups")
        self.conv_w = conv_w
        self.conv_b = conv_b
        self.scale = scale
        self.shift = shift
        self.num_groups = num_groups
        self.normalizer = normalizer
        self.inactive_fill = inactive_fill
        self.bn_momentum = 0.1
        self.bn_mean = np.zeros(channels, dtype=np.float64)
        self.bn_var = np.ones(channels, dtype=np.float64)

    @property
    def channels(self) -> int:
        return self.conv_w.data.shape[0]

    def conv_weights(self) -> ConvWeights:
        return ConvWeights(self.conv_w.data, self.conv_b.data)


@dataclass
class GlobalFeature:
    """Pointwise projection of a level's input plus its cached group stats."""

    g: Tensor | np.ndarray
    mean: Tensor | np.ndarray  # (B, num_groups)
    std: Tensor | np.ndarray  # (B, num_groups)
    num_groups: int
    relu_g: np.ndarray | None = field(default=None, repr=False)  # inference cache

    @property
    def values(self) -> np.ndarray:
        return self.g.data if isinstance(self.g, Tensor) else self.g


def global_feature(x_fpn: np.ndarray, w_point: ConvWeights, num_groups: int) -> GlobalFeature:
    """Inference-side global feature: 1x1 conv of the level input, stats cached."""
    g = kernels.pointwise_conv(x_fpn, w_point)
    mean, std = kernels.group_stats(g, num_groups)
    return GlobalFeature(g, mean, std, num_groups, relu_g=kernels.relu(g))


def global_stats(g: Tensor, num_groups: int) -> GlobalFeature:
    """Wrap an existing tape feature with its differentiable group stats."""
    mean = autodiff.group_mean(g, num_groups)
    centered = g - autodiff.repeat_groups(mean, g.data.shape[1])
    var = autodiff.group_mean(centered * centered, num_groups)
    std = (var + EPS).sqrt()
    return GlobalFeature(g, mean, std, num_groups)


def global_feature_train(x_fpn: Tensor, w: Tensor, b: Tensor, num_groups: int) -> GlobalFeature:
    """Training-side global feature on the tape; stats are differentiable."""
    if w.data.shape[1] != x_fpn.data.shape[1]:
        raise ContractViolation(
            f"pointwise kernel expects {w.data.shape[1]} channels, got {x_fpn.data.shape[1]}"
        )
    return global_stats(autodiff.conv2d(x_fpn, w, b, padding=0), num_groups)


def context_group_norm(l: Tensor, gf: GlobalFeature, layer: SparseConvLayer) -> Tensor:
    """Normalize ``l`` by the global feature's group stats, then affine.

    Computed as l * (scale/std) + (shift - mean*scale/std): the folded
    coefficients are (B, C, 1, 1) sized, leaving two full-map operations.
    """
    if not isinstance(gf.mean, Tensor):
        raise ContractViolation("training-mode normalization needs tape statistics")
    if l.data.shape[:2] != gf.values.shape[:2]:
        raise ContractViolation(
            f"feature {l.data.shape} does not match context feature {gf.values.shape}"
        )
    c = l.data.shape[1]
    mean = autodiff.repeat_groups(gf.mean, c)
    std = autodiff.repeat_groups(gf.std, c)
    gain = layer.scale / std
    return l * gain + (layer.shift - mean * gain)


def _tape_stats_for(kind: str, l: Tensor, mask: np.ndarray | None,
                    num_groups: int) -> tuple[Tensor, Tensor]:
    """Mean/std tensors (broadcastable to ``l``) for the ablation normalizers.

    With a mask, statistics pool active pixels only, the convention of
    sparse execution; without one they are the textbook dense statistics.
    """
    c = l.data.shape[1]
    if kind == "group_norm":
        groups = num_groups
    elif kind == "instance_norm":
        groups = c
    else:
        raise ContractViolation(f"no tape statistics for normalizer {kind!r}")
    if mask is None:
        mean = autodiff.group_mean(l, groups)
        centered = l - autodiff.repeat_groups(mean, c)
        var = autodiff.group_mean(centered * centered, groups)
    else:
        mean = autodiff.masked_group_mean(l, mask, groups)
        centered = l - autodiff.repeat_groups(mean, c)
        var = autodiff.masked_group_mean(centered * centered, mask, groups)
    return autodiff.repeat_groups(mean, c), autodiff.repeat_groups((var + EPS).sqrt(), c)


def _normalize_train(l: Tensor, gf: GlobalFeature, layer: SparseConvLayer,
                     mask: np.ndarray | None) -> Tensor:
    kind = layer.normalizer
    if kind == "none":
        return l
    if kind == "context_gn":
        return context_group_norm(l, gf, layer)
    if kind == "batch_norm":
        m = np.broadcast_to(np.ones((1, 1, 1, 1), dtype=l.data.dtype), (l.data.shape[0], 1) + l.data.shape[2:]) \
            if mask is None else mask
        mean = autodiff.masked_channel_mean(l, m)
        centered = l - mean
        var = autodiff.masked_channel_mean(centered * centered, m)
        if mask is None:  # dense shadow pass refreshes the running averages
            mom = layer.bn_momentum
            layer.bn_mean = (1 - mom) * layer.bn_mean + mom * mean.data.reshape(-1).astype(np.float64)
            layer.bn_var = (1 - mom) * layer.bn_var + mom * var.data.reshape(-1).astype(np.float64)
        return layer.scale * ((l - mean) / (var + EPS).sqrt()) + layer.shift
    mean, std = _tape_stats_for(kind, l, mask, layer.num_groups)
    return layer.scale * ((l - mean) / std) + layer.shift


def layer_forward_train(x: Tensor, st_mask: Tensor, hard: np.ndarray,
                        gf: GlobalFeature, layer: SparseConvLayer,
                        collect_normed: list | None = None) -> Tensor:
    """Sparse-path training forward.

    Active pixels carry relu(norm(conv(x)) + G); inactive pixels carry the
    residual pathway only (relu(G), or zero under the ablation fill). The
    conv is evaluated densely and masked, which matches true sparse
    execution value-for-value while keeping the backward pass simple.
    The pre-residual normalized feature (the consistency-loss stage) is
    appended to ``collect_normed`` when given.
    """
    conv = autodiff.conv2d(x, layer.conv_w, layer.conv_b, padding=1)
    normed = _normalize_train(conv, gf, layer, hard)
    if collect_normed is not None:
        collect_normed.append(normed)
    active = (normed + gf.g).relu()
    if layer.inactive_fill == "zero":
        return st_mask * active
    fill = gf.g.relu()
    return fill + st_mask * (active - fill)


def layer_forward_dense(x: Tensor, gf: GlobalFeature, layer: SparseConvLayer,
                        collect_normed: list | None = None) -> Tensor:
    """Dense shadow forward (training only): every pixel, same weights."""
    if not isinstance(x, Tensor) or not isinstance(gf.g, Tensor):
        raise ModeViolation("dense shadow path is a training-mode operation")
    conv = autodiff.conv2d(x, layer.conv_w, layer.conv_b, padding=1)
    normed = _normalize_train(conv, gf, layer, None)
    if collect_normed is not None:
        collect_normed.append(normed)
    return (normed + gf.g).relu()


# -- fused inference ----------------------------------------------------------


def _normalize_rows_infer(rows: np.ndarray, row_batch: np.ndarray, full_map: np.ndarray,
                          gf: GlobalFeature, layer: SparseConvLayer,
                          mask: HardMask) -> np.ndarray:
    """Normalize the (n, C) active rows per the layer's normalizer kind."""
    kind = layer.normalizer
    c = rows.shape[1]
    scale = layer.scale.data.reshape(c)
    shift = layer.shift.data.reshape(c)
    if kind == "none":
        return rows
    if kind == "context_gn":
        per = c // gf.num_groups
        mean = np.repeat(gf.mean, per, axis=1)[row_batch]  # (n, C)
        std = np.repeat(gf.std, per, axis=1)[row_batch]
        return scale * ((rows - mean) / std) + shift
    if kind == "batch_norm":
        mean = layer.bn_mean.astype(rows.dtype)
        std = np.sqrt(layer.bn_var + EPS).astype(rows.dtype)
        return scale * ((rows - mean) / std) + shift
    groups = layer.num_groups if kind == "group_norm" else c
    mean, std = _masked_group_stats_np(full_map, mask, groups)
    per = full_map.shape[1] // groups
    mean = np.repeat(mean, per, axis=1)[row_batch]
    std = np.repeat(std, per, axis=1)[row_batch]
    return scale * ((rows - mean) / std) + shift


def _masked_group_stats_np(x: np.ndarray, mask: HardMask, groups: int) -> tuple[np.ndarray, np.ndarray]:
    b, c = x.shape[:2]
    m = mask.as_float().astype(x.dtype)
    per = c // groups
    denom = np.maximum(m.sum(axis=(1, 2, 3)) * per, 1.0)[:, None]
    summed = (x * m).reshape(b, groups, -1).sum(axis=2)
    mean = summed / denom
    centered = (x - np.repeat(mean, per, axis=1)[:, :, None, None]) * m
    var = (centered * centered).reshape(b, groups, -1).sum(axis=2) / denom
    return mean, np.sqrt(var + np.asarray(EPS, dtype=x.dtype))


def layer_forward_infer(x: np.ndarray, mask: HardMask, gf: GlobalFeature,
                        layer: SparseConvLayer, ledger: FlopLedger | None = None,
                        level: int = 0, branch: str = "", name: str = "") -> np.ndarray:
    """Inference forward touching only active rows after the sparse conv.

    Produces the same values as the composed reference ops
    (sparse conv -> normalize -> +G -> relu, inactive pixels filled with
    relu(G) or zero) but without full-map elementwise work.
    """
    b, c, h, w = x.shape
    active = mask.active_set
    n = len(active)
    o = layer.conv_w.data.shape[0]
    if ledger is not None:
        ledger.add_conv(n * 9 * c * o, level, branch, name)
        ledger.add_elementwise(b * h * w * o, level, branch)  # residual add

    if layer.inactive_fill == "zero":
        out = np.zeros((b, o, h, w), dtype=x.dtype)
    else:
        out = gf.relu_g.copy()
    if n == 0:
        return out

    bb, yy, xx = active[:, 0], active[:, 1], active[:, 2]
    xp = kernels.pad1(x)
    offs = np.arange(3)
    patches = xp[bb[:, None, None], :, (yy[:, None] + offs)[:, :, None], (xx[:, None] + offs)[:, None, :]]
    rows = patches.transpose(0, 3, 1, 2).reshape(n, c * 9) @ layer.conv_w.data.reshape(o, -1).T
    rows = rows + layer.conv_b.data

    # the group/instance ablations need the conv output scattered to take stats
    full_map = None
    if layer.normalizer in ("group_norm", "instance_norm"):
        full_map = np.zeros((b, o, h, w), dtype=x.dtype)
        full_map[bb, :, yy, xx] = rows
    rows = _normalize_rows_infer(rows, bb, full_map, gf, layer, mask)
    rows = np.maximum(rows + gf.values[bb, :, yy, xx], 0)
    out[bb, :, yy, xx] = rows
    return out


def sparse_pred_infer(x: np.ndarray, mask: HardMask, w: ConvWeights,
                      ledger: FlopLedger | None = None,
                      level: int = 0, branch: str = "") -> np.ndarray:
    """Final prediction conv, sparse: inactive pixels output the bias."""
    b, c, h, wd = x.shape
    o = w.out_channels
    bias = w.bias if w.bias is not None else np.zeros(o, dtype=x.dtype)
    out = np.broadcast_to(bias.reshape(1, o, 1, 1), (b, o, h, wd)).astype(x.dtype).copy()
    active = mask.active_set
    n = len(active)
    if ledger is not None:
        ledger.add_conv(n * 9 * c * o, level, branch, "pred")
    if n == 0:
        return out
    bb, yy, xx = active[:, 0], active[:, 1], active[:, 2]
    xp = kernels.pad1(x)
    offs = np.arange(3)
    patches = xp[bb[:, None, None], :, (yy[:, None] + offs)[:, :, None], (xx[:, None] + offs)[:, None, :]]
    rows = patches.transpose(0, 3, 1, 2).reshape(n, c * 9) @ w.weight.reshape(o, -1).T
    out[bb, :, yy, xx] = rows + bias
    return out


# -- norm loss ----------------------------------------------------------------


def norm_loss(sparse_feats, dense_feats, masks, num_levels: int) -> Tensor:
    """Mean over levels and stacked layers of ||(dense - sparse) * mask||^2.

    ``sparse_feats``/``dense_feats`` are per-level lists of per-layer feature
    maps; ``masks`` holds one mask per level (a straight-through tensor in
    training, or a HardMask/array treated as constant). Masking the sparse
    side too keeps inactive residual values out of the loss.
    """
    if len(sparse_feats) != num_levels or len(dense_feats) != num_levels or len(masks) != num_levels:
        raise ContractViolation("per-level lists must all have length num_levels")
    layers_per_level = None
    total: Tensor | None = None
    for level in range(num_levels):
        s_list, d_list = sparse_feats[level], dense_feats[level]
        if len(s_list) != len(d_list):
            raise ContractViolation(f"level {level}: sparse/dense layer lists misaligned")
        if layers_per_level is None:
            layers_per_level = len(s_list)
        elif len(s_list) != layers_per_level:
            raise ContractViolation("all levels must stack the same number of layers")
        m = masks[level]
        if isinstance(m, HardMask):
            m = Tensor(m.as_float())
        elif isinstance(m, np.ndarray):
            m = Tensor(m.astype(default_dtype()))
        for s, d in zip(s_list, d_list):
            s_t = s if isinstance(s, Tensor) else Tensor(s)
            d_t = d if isinstance(d, Tensor) else Tensor(d)
            diff = (d_t - s_t) * m
            term = (diff * diff).sum()
            total = term if total is None else total + term
    if layers_per_level is None or layers_per_level == 0:
        raise ContractViolation("norm loss needs at least one layer per level")
    return total * (1.0 / (layers_per_level * num_levels))
