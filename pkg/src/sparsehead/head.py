"""The full detection head: per level, two branches (classification and
box regression), each with its own mask network, four sparse conv blocks
and a sparse prediction conv. Weights are shared across pyramid levels,
mirroring standard dense-head practice.

Also provides scale-range label assignment from synthetic ground truth and
a momentum-SGD optimizer for the parameter tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff, context, kernels, losses, masking
from .autodiff import Tensor
from .context import GlobalFeature, SparseConvLayer
from .dtypes import as_default, default_dtype
from .errors import ContractViolation, ModeViolation
from .kernels import ConvWeights
from .ledger import FlopLedger, context_feature_macs, dense_head_macs, mask_net_macs
from .losses import LevelLabels, LossWeights, RatioMode
from .masking import GumbelNoise, HardMask

BRANCHES = ("cls", "reg")
CLS_PRIOR_BIAS = -4.59  # logit of a 0.01 foreground prior


@dataclass
class HeadConfig:
    num_levels: int = 3
    channels: int = 64
    num_classes: int = 3
    stacked_layers: int = 4
    level_strides: tuple[int, ...] = (8, 16, 32)
    num_groups: int = 8
    normalizer: str = "context_gn"
    inactive_fill: str = "context"
    ratio_mode: RatioMode = field(default_factory=RatioMode)
    tau: float = 1.0
    ratio_tau: float = 0.25  # sharpness of the activation-count estimator
    seed: int = 0

    def __post_init__(self):
        self.level_strides = tuple(int(s) for s in self.level_strides)
        if self.num_levels < 1:
            raise ContractViolation("need at least one pyramid level")
        if len(self.level_strides) != self.num_levels:
            raise ContractViolation("one stride per level required")
        if any(b >= a for a, b in zip(self.level_strides[1:], self.level_strides)):
            raise ContractViolation("strides must be strictly increasing")
        if self.channels % self.num_groups != 0:
            raise ContractViolation("channels must divide into groups")
        if isinstance(self.ratio_mode, str):
            self.ratio_mode = RatioMode.parse(self.ratio_mode)

    def level_shape(self, image_hw: tuple[int, int], level: int) -> tuple[int, int]:
        s = self.level_strides[level]
        return (math.ceil(image_hw[0] / s), math.ceil(image_hw[1] / s))

    def branch_out_channels(self, branch: str) -> int:
        return self.num_classes if branch == "cls" else 4


@dataclass
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    class_id: int

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class GtScene:
    """Ground truth for one image: pixel-space boxes with class ids."""

    image_hw: tuple[int, int]
    boxes: list[Box]

    def __post_init__(self):
        h, w = self.image_hw
        for b in self.boxes:
            if not (0 <= b.x0 < b.x1 <= w and 0 <= b.y0 < b.y1 <= h):
                raise ContractViolation(f"box {b} outside image {self.image_hw} or degenerate")
            if b.class_id < 1:
                raise ContractViolation("foreground class ids start at 1")


def level_of_box(box: Box, cfg: HeadConfig) -> int:
    """Scale-range assignment: level k owns sqrt(area) in [4*s_k, 8*s_k).

    The lowest level is open below and the highest open above.
    """
    size = math.sqrt(box.area)
    for k, stride in enumerate(cfg.level_strides):
        low = 4 * stride if k > 0 else 0.0
        high = 8 * stride if k < cfg.num_levels - 1 else math.inf
        if low <= size < high:
            return k
    return cfg.num_levels - 1


def assign_labels(scene: GtScene, cfg: HeadConfig) -> list[LevelLabels]:
    """Rasterize boxes into per-level class maps (batch of one).

    A pixel is positive when its center falls inside a box assigned to that
    level; overlaps resolve in favor of the smaller box.
    """
    maps = [np.zeros((1,) + cfg.level_shape(scene.image_hw, k), dtype=np.int64)
            for k in range(cfg.num_levels)]
    per_level: list[list[Box]] = [[] for _ in range(cfg.num_levels)]
    for box in scene.boxes:
        per_level[level_of_box(box, cfg)].append(box)
    for k, boxes in enumerate(per_level):
        stride = cfg.level_strides[k]
        h, w = maps[k].shape[1:]
        for box in sorted(boxes, key=lambda b: -b.area):  # smaller boxes painted last
            ys, xs = _covered_pixels(box, stride, h, w)
            if ys is not None:
                maps[k][0, ys[:, None], xs[None, :]] = box.class_id
    return [LevelLabels(m, cfg.num_classes) for m in maps]


def _covered_pixels(box: Box, stride: int, h: int, w: int):
    """Index ranges of pixels whose centers (k+0.5)*stride lie inside the box."""
    y_lo = math.ceil(box.y0 / stride - 0.5)
    y_hi = math.floor((box.y1 - 1e-9) / stride - 0.5)
    x_lo = math.ceil(box.x0 / stride - 0.5)
    x_hi = math.floor((box.x1 - 1e-9) / stride - 0.5)
    y_lo, x_lo = max(y_lo, 0), max(x_lo, 0)
    y_hi, x_hi = min(y_hi, h - 1), min(x_hi, w - 1)
    if y_lo > y_hi or x_lo > x_hi:
        return None, None
    return np.arange(y_lo, y_hi + 1), np.arange(x_lo, x_hi + 1)


def stack_labels(per_scene: list[list[LevelLabels]]) -> list[LevelLabels]:
    """Merge single-scene label lists into batched per-level labels."""
    num_levels = len(per_scene[0])
    out = []
    for k in range(num_levels):
        maps = np.concatenate([scene[k].class_map for scene in per_scene], axis=0)
        out.append(LevelLabels(maps, per_scene[0][k].num_classes))
    return out


# -- outputs ------------------------------------------------------------------


@dataclass
class HeadOutputs:
    predictions: list[dict[str, np.ndarray]]  # per level {branch: map}
    masks: list[dict[str, HardMask]]
    ledger: FlopLedger
    sparse_features: list[dict[str, list]] | None = None
    dense_features: list[dict[str, list]] | None = None


@dataclass
class TrainStep:
    losses: dict[str, Tensor]
    outputs: HeadOutputs
    targets: list[float]
    hard_ratios: list[dict[str, float]]


# -- the head itself ----------------------------------------------------------


class DetectionHead:
    def __init__(self, cfg: HeadConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        dt = default_dtype()

        def conv_init(shape):
            return Tensor(rng.normal(0.0, 0.01, size=shape).astype(dt))

        # unit-variance projection: the context feature feeds the normalizer
        # statistics, so its std must not collapse toward the epsilon guard
        self.g_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(c), size=(c, c, 1, 1)).astype(dt))
        self.g_b = Tensor(np.zeros(c, dtype=dt))
        self.branches: dict[str, dict] = {}
        for branch in BRANCHES:
            layers = []
            for _ in range(cfg.stacked_layers):
                layers.append(SparseConvLayer(
                    conv_w=conv_init((c, c, 3, 3)),
                    conv_b=Tensor(np.zeros(c, dtype=dt)),
                    scale=Tensor(np.ones((1, c, 1, 1), dtype=dt)),
                    shift=Tensor(np.zeros((1, c, 1, 1), dtype=dt)),
                    num_groups=cfg.num_groups,
                    normalizer=cfg.normalizer,
                    inactive_fill=cfg.inactive_fill,
                ))
            out_ch = cfg.branch_out_channels(branch)
            pred_bias = np.full(out_ch, CLS_PRIOR_BIAS if branch == "cls" else 0.0, dtype=dt)
            self.branches[branch] = {
                # zero-initialized mask net: activation starts at one half
                "mask_w": Tensor(np.zeros((1, c, 3, 3), dtype=dt)),
                "mask_b": Tensor(np.zeros(1, dtype=dt)),
                "layers": layers,
                "pred_w": conv_init((out_ch, c, 3, 3)),
                "pred_b": Tensor(pred_bias),
            }

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params = {"g_point.weight": self.g_w, "g_point.bias": self.g_b}
        for branch in BRANCHES:
            parts = self.branches[branch]
            params[f"{branch}.mask.weight"] = parts["mask_w"]
            params[f"{branch}.mask.bias"] = parts["mask_b"]
            for j, layer in enumerate(parts["layers"], start=1):
                prefix = f"{branch}.layer{j}"
                params[f"{prefix}.conv.weight"] = layer.conv_w
                params[f"{prefix}.conv.bias"] = layer.conv_b
                params[f"{prefix}.norm.scale"] = layer.scale
                params[f"{prefix}.norm.shift"] = layer.shift
            params[f"{branch}.pred.weight"] = parts["pred_w"]
            params[f"{branch}.pred.bias"] = parts["pred_b"]
        return params

    def _check_feats(self, feats: list[np.ndarray]) -> None:
        if len(feats) != self.cfg.num_levels:
            raise ContractViolation(f"expected {self.cfg.num_levels} level maps, got {len(feats)}")
        for x in feats:
            kernels.check_feature_map(x)
            if x.shape[1] != self.cfg.channels:
                raise ContractViolation(
                    f"feature maps must have {self.cfg.channels} channels, got {x.shape[1]}"
                )

    # -- training forward -----------------------------------------------------

    def forward_train(self, feats: list[np.ndarray], labels: list[LevelLabels],
                      noise_rng: np.random.Generator, weights: LossWeights,
                      forced_mask: str | None = None) -> TrainStep:
        """Run both branch cascades with their dense shadows and build losses.

        ``forced_mask`` overrides mask decisions for diagnostics:
        "all_active" runs the dense limit, "all_inactive" the empty one.
        """
        cfg = self.cfg
        self._check_feats(feats)
        if len(labels) != cfg.num_levels:
            raise ContractViolation("one label map per level required")

        predictions, mask_records = [], []
        sparse_all, dense_all, normed_all = [], [], []
        st_masks_per_level = []  # straight-through tensors, one per level+branch
        cls_preds = []
        hard_ratios = []

        for level in range(cfg.num_levels):
            x = Tensor(as_default(feats[level]))
            gf = context.global_feature_train(x, self.g_w, self.g_b, cfg.num_groups)
            level_preds, level_masks = {}, {}
            level_sparse, level_dense, level_normed = {}, {}, {}
            level_st = {}
            level_ratio = {}
            b, _, h, w = x.data.shape

            for branch in BRANCHES:
                parts = self.branches[branch]
                s_logits = autodiff.conv2d(x, parts["mask_w"], parts["mask_b"], padding=1)
                noise = masking.gumbel_from_rng((b, 1, h, w), noise_rng)
                hmask = masking.train_mask(s_logits, noise, cfg.tau,
                                           ratio_tau=cfg.ratio_tau)
                if forced_mask == "all_active":
                    hmask = _forced_mask(hmask, True)
                elif forced_mask == "all_inactive":
                    hmask = _forced_mask(hmask, False)
                st = hmask.straight_through()

                xs = x
                feats_sparse, normed_sparse = [], []
                for j, layer in enumerate(parts["layers"], start=1):
                    xs = context.layer_forward_train(xs, st, hmask.decisions, gf, layer,
                                                     collect_normed=normed_sparse)
                    feats_sparse.append(xs)
                # sparse prediction: inactive pixels fall back to the bias alone
                pred = st * autodiff.conv2d(xs, parts["pred_w"], None, padding=1) + _as_bias(parts["pred_b"])

                xd = x
                feats_dense, normed_dense = [], []
                for layer in parts["layers"]:
                    xd = context.layer_forward_dense(xd, gf, layer, collect_normed=normed_dense)
                    feats_dense.append(xd)

                level_preds[branch] = pred
                level_masks[branch] = hmask
                level_sparse[branch] = feats_sparse
                level_dense[branch] = feats_dense
                level_normed[branch] = (normed_sparse, normed_dense)
                level_st[branch] = st
                level_ratio[branch] = masking.active_ratio(hmask)
                if branch == "cls":
                    cls_preds.append(pred)

            predictions.append(level_preds)
            mask_records.append(level_masks)
            sparse_all.append(level_sparse)
            dense_all.append(level_dense)
            normed_all.append(level_normed)
            st_masks_per_level.append(level_st)
            hard_ratios.append(level_ratio)

        targets = cfg.ratio_mode.targets(labels)

        det = losses.det_loss_surrogate(cls_preds, labels)
        norm_terms = []
        for branch in BRANCHES:
            norm_terms.append(context.norm_loss(
                [normed_all[i][branch][0] for i in range(cfg.num_levels)],
                [normed_all[i][branch][1] for i in range(cfg.num_levels)],
                [st_masks_per_level[i][branch] for i in range(cfg.num_levels)],
                cfg.num_levels,
            ))
        norm = (norm_terms[0] + norm_terms[1]) * 0.5
        amm = losses.amm_loss(
            [tuple(mask_records[i][b] for b in BRANCHES) for i in range(cfg.num_levels)],
            targets, cfg.num_levels,
        )
        total = losses.total_loss(det, norm, amm, weights)

        outputs = HeadOutputs(
            predictions=predictions, masks=mask_records, ledger=FlopLedger(),
            sparse_features=sparse_all, dense_features=dense_all,
        )
        return TrainStep(
            losses={"det": det, "norm": norm, "amm": amm, "total": total},
            outputs=outputs, targets=targets, hard_ratios=hard_ratios,
        )

    # -- inference forward ------------------------------------------------------

    def forward_infer(self, feats: list[np.ndarray], ledger: FlopLedger | None = None,
                      forced_mask: str | None = None) -> HeadOutputs:
        """Masked sparse inference; fills the ledger with actual and reference MACs."""
        cfg = self.cfg
        self._check_feats(feats)
        ledger = ledger if ledger is not None else FlopLedger()
        predictions, mask_records = [], []

        for level in range(cfg.num_levels):
            x = as_default(feats[level])
            b, _, h, w = x.shape
            gf = context.global_feature(x, ConvWeights(self.g_w.data, self.g_b.data), cfg.num_groups)
            ledger.add_context(b * context_feature_macs(h, w, cfg.channels), level)
            for branch, macs in dense_head_macs(h, w, cfg.channels, cfg.num_classes,
                                                cfg.stacked_layers).items():
                ledger.add_dense(b * macs, level, branch, "head")
            level_preds, level_masks = {}, {}

            for branch in BRANCHES:
                parts = self.branches[branch]
                s = masking.mask_logits(x, ConvWeights(parts["mask_w"].data, parts["mask_b"].data))
                ledger.add_mask(b * mask_net_macs(h, w, cfg.channels), level, branch)
                hmask = masking.infer_mask(s)
                if forced_mask == "all_active":
                    hmask = HardMask(np.ones((b, 1, h, w), dtype=bool))
                elif forced_mask == "all_inactive":
                    hmask = HardMask(np.zeros((b, 1, h, w), dtype=bool))

                xs = x
                for j, layer in enumerate(parts["layers"], start=1):
                    xs = context.layer_forward_infer(xs, hmask, gf, layer, ledger,
                                                     level, branch, f"layer{j}")
                pred = context.sparse_pred_infer(
                    xs, hmask, ConvWeights(parts["pred_w"].data, parts["pred_b"].data),
                    ledger, level, branch)
                level_preds[branch] = pred
                level_masks[branch] = hmask

            predictions.append(level_preds)
            mask_records.append(level_masks)
        return HeadOutputs(predictions=predictions, masks=mask_records, ledger=ledger)

    def forward_dense_reference(self, feats: list[np.ndarray],
                                ledger: FlopLedger | None = None) -> HeadOutputs:
        """The dense baseline head (no mask network), for timing comparisons."""
        cfg = self.cfg
        self._check_feats(feats)
        ledger = ledger if ledger is not None else FlopLedger()
        predictions = []
        for level in range(cfg.num_levels):
            x = as_default(feats[level])
            b, _, h, w = x.shape
            gf = context.global_feature(x, ConvWeights(self.g_w.data, self.g_b.data), cfg.num_groups)
            for branch, macs in dense_head_macs(h, w, cfg.channels, cfg.num_classes,
                                                cfg.stacked_layers).items():
                ledger.add_dense(b * macs, level, branch, "head")
            level_preds = {}
            for branch in BRANCHES:
                parts = self.branches[branch]
                xs = x
                for layer in parts["layers"]:
                    conv = kernels.conv2d(xs, layer.conv_weights(), padding=1)
                    normed = _normalize_dense_infer(conv, gf, layer)
                    xs = kernels.relu(normed + gf.values)
                level_preds[branch] = kernels.conv2d(
                    xs, ConvWeights(parts["pred_w"].data, parts["pred_b"].data), padding=1)
            predictions.append(level_preds)
        return HeadOutputs(predictions=predictions, masks=[], ledger=ledger)


def _normalize_dense_infer(conv: np.ndarray, gf: GlobalFeature, layer: SparseConvLayer) -> np.ndarray:
    from .dtypes import EPS

    c = conv.shape[1]
    scale = layer.scale.data.reshape(1, c, 1, 1)
    shift = layer.shift.data.reshape(1, c, 1, 1)
    kind = layer.normalizer
    if kind == "none":
        return conv
    if kind == "context_gn":
        per = c // gf.num_groups
        mean = np.repeat(gf.mean, per, axis=1)[:, :, None, None]
        std = np.repeat(gf.std, per, axis=1)[:, :, None, None]
    elif kind == "batch_norm":
        mean = layer.bn_mean.astype(conv.dtype).reshape(1, c, 1, 1)
        std = np.sqrt(layer.bn_var + EPS).astype(conv.dtype).reshape(1, c, 1, 1)
    else:
        groups = layer.num_groups if kind == "group_norm" else c
        m, s = kernels.group_stats(conv, groups)
        per = c // groups
        mean = np.repeat(m, per, axis=1)[:, :, None, None]
        std = np.repeat(s, per, axis=1)[:, :, None, None]
    return scale * ((conv - mean) / std) + shift


def _forced_mask(hmask: HardMask, value: bool) -> HardMask:
    forced = HardMask(np.full_like(hmask.decisions, value), hmask.soft)
    return forced


def _as_bias(bias: Tensor) -> Tensor:
    """View a (C,) bias as (1, C, 1, 1) on the tape."""
    c = bias.data.shape[0]
    out = Tensor(bias.data.reshape(1, c, 1, 1), (bias,))

    def back(g):
        autodiff._accum(bias, g.reshape(-1, c).sum(axis=0) if g.ndim == 2 else g.sum(axis=(0, 2, 3)))

    out._backward = back
    return out


# -- optimizer ------------------------------------------------------------------


class SgdMomentum:
    """Plain SGD with momentum; updates parameter buffers in place."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.01, momentum: float = 0.9,
                 grad_clip: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        clip_scale = 1.0
        if self.grad_clip is not None and grads:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.grad_clip:
                clip_scale = self.grad_clip / norm
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += clip_scale * g
            p.data -= self.lr * v
            p.invalidate_cache()
