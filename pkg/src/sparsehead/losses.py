"""Training objective: ratio targets, mask-ratio loss, detection surrogate.

The mask-ratio loss drives each level's activation ratio toward the
ground-truth foreground fraction of that level (or a pooled/fixed target,
per mode). The detection surrogate is a per-pixel sigmoid focal loss; the
full detection losses of real detectors are out of scope here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor
from .dtypes import default_dtype
from .errors import ContractViolation
from .masking import HardMask, active_ratio


@dataclass
class LevelLabels:
    """Per-pixel integer class ids for one pyramid level; 0 is background."""

    class_map: np.ndarray  # (B, h, w) integer ids in [0, num_classes]
    num_classes: int

    def __post_init__(self):
        if self.class_map.ndim != 3:
            raise ContractViolation(f"class map must be (B, h, w), got {self.class_map.shape}")
        if self.class_map.min(initial=0) < 0 or self.class_map.max(initial=0) > self.num_classes:
            raise ContractViolation(f"class ids must lie in [0, {self.num_classes}]")

    @property
    def pos_count(self) -> int:
        return int((self.class_map > 0).sum())

    @property
    def numel(self) -> int:
        return int(self.class_map.size)

    def one_hot(self) -> np.ndarray:
        """Foreground one-hot targets, shape (B, num_classes, h, w)."""
        b, h, w = self.class_map.shape
        out = np.zeros((b, self.num_classes, h, w), dtype=default_dtype())
        for k in range(1, self.num_classes + 1):
            out[:, k - 1] = self.class_map == k
        return out


@dataclass
class LossWeights:
    alpha: float = 1.0  # consistency (norm) loss weight
    beta: float = 10.0  # mask-ratio loss weight

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractViolation("loss weights must be non-negative")


@dataclass(frozen=True)
class RatioMode:
    """How per-level activation-ratio targets are chosen.

    ``layerwise`` matches each level's own foreground fraction, ``global``
    pools the fractions over levels into one shared target, and ``fixed``
    targets activation 1 - mask_ratio everywhere (labels ignored).
    """

    kind: str = "layerwise"
    mask_ratio: float | None = None

    def __post_init__(self):
        if self.kind not in ("layerwise", "global", "fixed"):
            raise ContractViolation(f"unknown ratio mode {self.kind!r}")
        if self.kind == "fixed":
            if self.mask_ratio is None or not 0.0 <= self.mask_ratio <= 1.0:
                raise ContractViolation("fixed mode needs a mask ratio in [0, 1]")
        elif self.mask_ratio is not None:
            raise ContractViolation(f"{self.kind} mode takes no mask ratio")

    @staticmethod
    def parse(text: str) -> "RatioMode":
        t = text.strip().lower()
        if t in ("layerwise", "adaptive_layerwise"):
            return RatioMode("layerwise")
        if t in ("global", "adaptive_global"):
            return RatioMode("global")
        if t.startswith("fixed:"):
            return RatioMode("fixed", float(t.split(":", 1)[1]))
        raise ContractViolation(f"cannot parse ratio mode {text!r}")

    def encode(self) -> str:
        return f"fixed:{self.mask_ratio:g}" if self.kind == "fixed" else self.kind

    def targets(self, labels: list[LevelLabels]) -> list[float]:
        if self.kind == "fixed":
            return [1.0 - self.mask_ratio] * len(labels)
        if self.kind == "global":
            pooled = global_target(labels)
            return [pooled] * len(labels)
        return [target_ratio(lv) for lv in labels]


def target_ratio(labels: LevelLabels) -> float:
    """Foreground fraction of one level: positives / all pixels."""
    return labels.pos_count / labels.numel


def global_target(labels: list[LevelLabels]) -> float:
    pos = sum(lv.pos_count for lv in labels)
    numel = sum(lv.numel for lv in labels)
    return pos / numel


def amm_loss(masks, targets: list[float], num_levels: int) -> Tensor:
    """Mean over levels of (activation ratio - target)^2.

    ``masks`` holds one entry per level: either a single mask or a tuple of
    per-branch masks whose terms are averaged. Training-mode masks contribute
    their differentiable soft ratio; inference masks contribute the hard
    ratio as a constant.
    """
    if len(masks) != num_levels or len(targets) != num_levels:
        raise ContractViolation(
            f"expected {num_levels} per-level entries, got {len(masks)} masks / {len(targets)} targets"
        )
    total: Tensor | None = None
    for entry, target in zip(masks, targets):
        group = entry if isinstance(entry, (tuple, list)) else (entry,)
        level_term: Tensor | None = None
        for mask in group:
            ratio = _ratio_term(mask)
            diff = ratio - float(target)
            term = diff * diff
            level_term = term if level_term is None else level_term + term
        level_term = level_term * (1.0 / len(group))
        total = level_term if total is None else total + level_term
    return total * (1.0 / num_levels)


def _ratio_term(mask) -> Tensor:
    if isinstance(mask, HardMask):
        soft = mask.soft_ratio()
        return soft if soft is not None else Tensor(np.asarray(active_ratio(mask), dtype=default_dtype()))
    if isinstance(mask, Tensor):
        return mask.mean()
    raise ContractViolation(f"cannot take an activation ratio of {type(mask).__name__}")


def det_loss_surrogate(cls_pred: list[Tensor], labels: list[LevelLabels],
                       gamma: float = 2.0, balance: float = 0.25) -> Tensor:
    """Mean per-pixel sigmoid focal loss against one-hot labels, over levels."""
    if len(cls_pred) != len(labels):
        raise ContractViolation("one prediction map per level required")
    total: Tensor | None = None
    for logits, level in zip(cls_pred, labels):
        z = logits if isinstance(logits, Tensor) else Tensor(logits)
        b, c, h, w = z.data.shape
        if c != level.num_classes:
            raise ContractViolation(
                f"predictions have {c} channels but labels carry {level.num_classes} classes"
            )
        if (b, h, w) != level.class_map.shape:
            raise ContractViolation("prediction and label geometry disagree")
        t = Tensor(level.one_hot())
        p = z.sigmoid()
        pos = t * balance * ((1.0 - p) ** gamma) * (-z).softplus()
        neg = (1.0 - t) * (1.0 - balance) * (p**gamma) * z.softplus()
        term = (pos + neg).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(labels))


def total_loss(det, norm, amm, w: LossWeights) -> Tensor:
    """Weighted objective: detection + alpha * consistency + beta * ratio."""
    return as_tensor(det) + w.alpha * as_tensor(norm) + w.beta * as_tensor(amm)
