"""Multiply-accumulate accounting for dense vs sparse head execution.

Counts are exact integers derived from tensor geometry and active-pixel
counts, never measured. The dense reference covers only the head convolutions
(stacked 3x3 layers plus the prediction conv, both branches); the mask
network and the global-context pointwise conv are tracked separately since
they are overhead the sparse path pays on top.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field


@dataclass
class FlopLedger:
    count_elementwise: bool = False
    conv_macs: dict = field(default_factory=lambda: defaultdict(int))  # (level, branch, layer) -> MACs
    mask_macs: dict = field(default_factory=lambda: defaultdict(int))  # (level, branch) -> MACs
    context_macs: dict = field(default_factory=lambda: defaultdict(int))  # level -> MACs
    dense_macs: dict = field(default_factory=lambda: defaultdict(int))  # (level, branch, layer) -> MACs
    elementwise_ops: dict = field(default_factory=lambda: defaultdict(int))  # (level, branch) -> adds

    def add_conv(self, macs: int, level: int = 0, branch: str = "", layer: str = "") -> None:
        self.conv_macs[(level, branch, layer)] += int(macs)

    def add_mask(self, macs: int, level: int = 0, branch: str = "") -> None:
        self.mask_macs[(level, branch)] += int(macs)

    def add_context(self, macs: int, level: int = 0) -> None:
        self.context_macs[level] += int(macs)

    def add_dense(self, macs: int, level: int = 0, branch: str = "", layer: str = "") -> None:
        self.dense_macs[(level, branch, layer)] += int(macs)

    def add_elementwise(self, ops: int, level: int = 0, branch: str = "") -> None:
        if self.count_elementwise:
            self.elementwise_ops[(level, branch)] += int(ops)

    def merge(self, other: "FlopLedger") -> None:
        for src, dst in (
            (other.conv_macs, self.conv_macs),
            (other.mask_macs, self.mask_macs),
            (other.context_macs, self.context_macs),
            (other.dense_macs, self.dense_macs),
            (other.elementwise_ops, self.elementwise_ops),
        ):
            for key, val in src.items():
                dst[key] += val

    # -- totals -------------------------------------------------------------

    @property
    def total_conv(self) -> int:
        return sum(self.conv_macs.values())

    @property
    def total_mask(self) -> int:
        return sum(self.mask_macs.values())

    @property
    def total_context(self) -> int:
        return sum(self.context_macs.values())

    @property
    def total_sparse(self) -> int:
        """Everything the sparse path executes: convs + mask nets + context."""
        return self.total_conv + self.total_mask + self.total_context

    @property
    def total_dense(self) -> int:
        return sum(self.dense_macs.values())

    def reduction_pct(self) -> float:
        """Percent of dense-reference MACs the sparse path avoids."""
        if self.total_dense == 0:
            return 0.0
        return 100.0 * (1.0 - self.total_sparse / self.total_dense)


def dense_head_macs(h: int, w: int, channels: int, num_classes: int, stacked_layers: int = 4,
                    branches: tuple[str, ...] = ("cls", "reg")) -> dict[str, int]:
    """Closed-form dense MACs per branch for one level of size ``h x w``."""
    px = h * w
    out = {}
    for branch in branches:
        pred_out = num_classes if branch == "cls" else 4
        out[branch] = px * (stacked_layers * 9 * channels * channels + 9 * channels * pred_out)
    return out


def mask_net_macs(h: int, w: int, channels: int) -> int:
    return h * w * 9 * channels


def context_feature_macs(h: int, w: int, channels: int) -> int:
    return h * w * channels * channels
