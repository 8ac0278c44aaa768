"""Synthetic scenes: box layouts with controlled per-level foreground
fractions, and pyramid features derived from them.

Boxes are sampled per level inside that level's scale-assignment range and
rejection-sampled until the level's realized foreground pixel fraction lands
within the requested tolerance. Features are a fixed random linear projection
of the rendered class-occupancy image, average-pooled to each level's
resolution, plus gaussian noise; the projection is fixed per seed so the
learning problem is stationary across a run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dtypes import default_dtype
from .errors import ContractViolation, SceneInfeasible
from .head import Box, GtScene, HeadConfig, assign_labels
from .losses import LevelLabels


@dataclass
class SceneSpec:
    image_hw: tuple[int, int] = (320, 400)
    channels: int = 64
    num_classes: int = 3
    foreground_fraction: float | tuple[float, ...] = 0.12
    max_objects: int = 80
    tolerance: float = 0.03
    noise_sigma: float = 0.1
    seed: int = 0  # fixes the class-signature projection
    max_attempts: int = 1000

    def fraction_for(self, level: int, num_levels: int) -> float:
        if isinstance(self.foreground_fraction, (tuple, list)):
            if len(self.foreground_fraction) != num_levels:
                raise ContractViolation("one foreground fraction per level required")
            return float(self.foreground_fraction[level])
        return float(self.foreground_fraction)


def signature_projection(spec: SceneSpec) -> np.ndarray:
    """Fixed (num_classes+1, channels) class-signature matrix."""
    rng = np.random.default_rng(spec.seed)
    return rng.normal(size=(spec.num_classes + 1, spec.channels)).astype(default_dtype())


def _sample_level_boxes(spec: SceneSpec, cfg: HeadConfig, level: int, target: float,
                        rng: np.random.Generator) -> list[Box] | None:
    """One attempt at a box set whose label fraction hits target +- tolerance."""
    img_h, img_w = spec.image_hw
    stride = cfg.level_strides[level]
    lo = 4.0 * stride
    hi = min(8.0 * stride, float(min(img_h, img_w)))
    if hi <= lo:
        hi = lo + 1.0  # the level range does not fit; degenerate but legal
    h_k, w_k = cfg.level_shape(spec.image_hw, level)
    numel = h_k * w_k
    low_px = max((target - spec.tolerance) * numel, 0.0)
    high_px = (target + spec.tolerance) * numel

    boxes: list[Box] = []
    covered = np.zeros((h_k, w_k), dtype=bool)
    for _ in range(spec.max_objects):
        if covered.sum() >= low_px:
            break
        size = rng.uniform(lo, min(hi, 8.0 * stride) - 1e-3)
        aspect = rng.uniform(0.6, 1.6)
        bw = size * math.sqrt(aspect)
        bh = size / math.sqrt(aspect)
        if bw >= img_w or bh >= img_h:
            continue
        x0 = rng.uniform(0, img_w - bw)
        y0 = rng.uniform(0, img_h - bh)
        box = Box(x0, y0, x0 + bw, y0 + bh, int(rng.integers(1, spec.num_classes + 1)))
        boxes.append(box)
        ys = _center_range(box.y0, box.y1, stride, h_k)
        xs = _center_range(box.x0, box.x1, stride, w_k)
        if ys is not None and xs is not None:
            covered[ys[0] : ys[1], xs[0] : xs[1]] = True
    frac_px = covered.sum()
    if low_px <= frac_px <= high_px:
        return boxes
    return None


def _center_range(lo: float, hi: float, stride: int, count: int):
    start = max(math.ceil(lo / stride - 0.5), 0)
    stop = min(math.floor((hi - 1e-9) / stride - 0.5), count - 1) + 1
    if start >= stop:
        return None
    return (start, stop)


def gen_scene(spec: SceneSpec, cfg: HeadConfig,
              rng: np.random.Generator) -> tuple[GtScene, list[np.ndarray]]:
    """Sample one scene and synthesize its pyramid features (batch of one)."""
    if spec.image_hw[0] % cfg.level_strides[0] or spec.image_hw[1] % cfg.level_strides[0]:
        raise ContractViolation("image size must be a multiple of the finest stride")
    boxes: list[Box] = []
    for level in range(cfg.num_levels):
        target = spec.fraction_for(level, cfg.num_levels)
        for attempt in range(spec.max_attempts):
            got = _sample_level_boxes(spec, cfg, level, target, rng)
            if got is not None:
                boxes.extend(got)
                break
        else:
            raise SceneInfeasible(
                f"level {level}: could not realize foreground fraction "
                f"{target}+-{spec.tolerance} in {spec.max_attempts} attempts"
            )
    scene = GtScene(spec.image_hw, boxes)
    return scene, render_features(scene, spec, cfg, rng)


def render_features(scene: GtScene, spec: SceneSpec, cfg: HeadConfig,
                    rng: np.random.Generator) -> list[np.ndarray]:
    """Project the class-occupancy rendering to per-level feature maps."""
    dt = default_dtype()
    proj = signature_projection(spec)
    base_stride = cfg.level_strides[0]
    h0, w0 = cfg.level_shape(scene.image_hw, 0)

    occupancy = np.zeros((h0, w0), dtype=np.int64)
    for box in sorted(scene.boxes, key=lambda b: -b.area):  # smaller boxes win overlaps
        ys = _center_range(box.y0, box.y1, base_stride, h0)
        xs = _center_range(box.x0, box.x1, base_stride, w0)
        if ys is not None and xs is not None:
            occupancy[ys[0] : ys[1], xs[0] : xs[1]] = box.class_id

    one_hot = np.zeros((h0, w0, spec.num_classes + 1), dtype=dt)
    one_hot.reshape(-1, spec.num_classes + 1)[np.arange(h0 * w0), occupancy.reshape(-1)] = 1.0

    feats = []
    for level in range(cfg.num_levels):
        factor = cfg.level_strides[level] // base_stride
        h_k, w_k = cfg.level_shape(scene.image_hw, level)
        pooled = _block_pool(one_hot, factor, h_k, w_k)
        level_map = pooled @ proj  # (h_k, w_k, C)
        level_map += rng.normal(scale=spec.noise_sigma, size=level_map.shape)
        feats.append(np.ascontiguousarray(
            level_map.astype(dt).transpose(2, 0, 1)[None]))
    return feats


def _block_pool(one_hot: np.ndarray, factor: int, h_out: int, w_out: int) -> np.ndarray:
    """Average-pool by an integer factor, padding ragged edges as background."""
    if factor == 1:
        return one_hot
    h0, w0, c = one_hot.shape
    padded = np.zeros((h_out * factor, w_out * factor, c), dtype=one_hot.dtype)
    padded[:, :, 0] = 1.0  # background one-hot
    padded[:h0, :w0] = one_hot
    return padded.reshape(h_out, factor, w_out, factor, c).mean(axis=(1, 3))


def scene_labels(scene: GtScene, cfg: HeadConfig) -> list[LevelLabels]:
    return assign_labels(scene, cfg)
