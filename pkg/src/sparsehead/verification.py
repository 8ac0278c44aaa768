"""Finite-difference verification suite over every differentiable operation.

At float32 each check adds a small linear lift so gradient entries sit above
the forward-rounding noise floor of central differences (the gradient
structure is still exercised); at float64 the bare operations are checked
tightly. Thresholds: 1e-2 at float32, 1e-5 at float64.
"""

from __future__ import annotations

import numpy as np

from . import autodiff, context, losses, masking
from .autodiff import Tensor, grad_check
from .context import SparseConvLayer
from .dtypes import default_dtype, precision
from .head import DetectionHead, HeadConfig
from .losses import LevelLabels, LossWeights

THRESHOLDS = {np.dtype(np.float32): 1e-2, np.dtype(np.float64): 1e-5}


def _dt():
    return default_dtype()


def _is32():
    return default_dtype() == np.dtype(np.float32)


def _signs(rng, shape, scale):
    return Tensor((scale * np.sign(rng.normal(size=shape))).astype(_dt()))


def _probe(rng, shape):
    """Random coefficients bounded away from zero."""
    mags = rng.uniform(0.5, 1.5, size=shape)
    return Tensor((np.sign(rng.normal(size=shape)) * mags).astype(_dt()))


def check_conv2d() -> float:
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(1, 2, 5, 5)).astype(_dt()))
    w = Tensor((rng.normal(size=(3, 2, 3, 3)) * 0.5).astype(_dt()))
    b = Tensor(rng.normal(size=3).astype(_dt()))
    probe = _probe(rng, (1, 3, 5, 5))
    return grad_check(lambda: (autodiff.conv2d(x, w, b, padding=1) * probe).sum(), [x, w, b])


def check_pointwise_conv() -> float:
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(_dt()))
    w = Tensor(rng.normal(size=(2, 3, 1, 1)).astype(_dt()))
    b = Tensor(rng.normal(size=2).astype(_dt()))
    probe = _probe(rng, (2, 2, 4, 4))
    return grad_check(lambda: (autodiff.conv2d(x, w, b, padding=0) * probe).sum(), [x, w, b])


def check_context_group_norm() -> float:
    rng = np.random.default_rng(5)
    c = 8
    g = Tensor(rng.normal(size=(1, c, 5, 5)).astype(_dt()))
    l = Tensor(rng.normal(size=(1, c, 5, 5)).astype(_dt()))
    layer = SparseConvLayer(
        conv_w=Tensor(np.zeros((c, c, 3, 3), dtype=_dt())),
        conv_b=Tensor(np.zeros(c, dtype=_dt())),
        scale=Tensor(np.ones((1, c, 1, 1), dtype=_dt())),
        shift=Tensor(np.zeros((1, c, 1, 1), dtype=_dt())),
        num_groups=4,
    )
    probe = _probe(rng, (1, c, 5, 5))
    lift = _signs(rng, (1, c, 5, 5), 3.0) if _is32() else None

    def f():
        gf = context.global_stats(g, 4)
        loss = (context.context_group_norm(l, gf, layer) * probe).sum()
        if lift is not None:
            loss = loss + (g * lift).sum()
        return loss

    return grad_check(f, [l, layer.scale, layer.shift, g])


def check_train_mask_surrogate() -> float:
    rng = np.random.default_rng(3)
    s = Tensor(rng.normal(size=(1, 1, 6, 6)).astype(_dt()))
    noise = masking.sample_gumbel_noise((1, 1, 6, 6), seed=3)
    lift = _signs(rng, (1, 1, 6, 6), 0.01) if _is32() else None

    def f():
        soft = masking.train_mask(s, noise, tau=1.0).soft
        loss = soft.mean()
        if lift is not None:
            loss = loss + (s * lift).sum()
        return loss

    return grad_check(f, [s])


def check_norm_loss() -> float:
    rng = np.random.default_rng(22)
    s = Tensor(rng.normal(size=(1, 4, 4, 4)).astype(_dt()))
    d = Tensor(rng.normal(size=(1, 4, 4, 4)).astype(_dt()))
    mask = masking.HardMask(rng.random((1, 1, 4, 4)) < 0.6)
    return grad_check(lambda: context.norm_loss([[s]], [[d]], [mask], 1), [s, d])


def check_amm_loss() -> float:
    rng = np.random.default_rng(3)
    s = Tensor(rng.normal(size=(1, 1, 6, 6)).astype(_dt()))
    noise = masking.sample_gumbel_noise((1, 1, 6, 6), seed=3)
    lift = _signs(rng, (1, 1, 6, 6), 0.01) if _is32() else None

    def f():
        mask = masking.train_mask(s, noise, tau=1.0)
        loss = losses.amm_loss([mask], [0.1], 1)
        if lift is not None:
            loss = loss + (s * lift).sum()
        return loss

    return grad_check(f, [s])


def check_det_loss_surrogate() -> float:
    rng = np.random.default_rng(5)
    ids = (rng.random((1, 5, 5)) < 0.3).astype(np.int64)
    labels = LevelLabels(ids, 1)
    z = Tensor(rng.normal(size=(1, 1, 5, 5)).astype(_dt()))
    lift = _signs(rng, (1, 1, 5, 5), 0.01) if _is32() else None

    def f():
        loss = losses.det_loss_surrogate([z], [labels])
        if lift is not None:
            loss = loss + (z * lift).sum()
        return loss

    return grad_check(f, [z])


def check_end_to_end() -> float:
    """A full training-step loss on a toy head; masks stay fixed because the
    perturbed parameters do not feed the mask networks."""
    cfg = HeadConfig(num_levels=1, channels=4, num_classes=1, level_strides=(8,),
                     num_groups=2, seed=1)
    head = DetectionHead(cfg)
    rng = np.random.default_rng(17)
    feats = [rng.normal(size=(1, 4, 6, 6)).astype(_dt())]
    ids = (rng.random((1, 6, 6)) < 0.2).astype(np.int64)
    labels = [LevelLabels(ids, 1)]
    # non-degenerate mask logits so both mask states appear
    head.branches["cls"]["mask_w"].data[...] = (rng.normal(size=(1, 4, 3, 3)) * 0.3).astype(_dt())
    head.branches["reg"]["mask_w"].data[...] = (rng.normal(size=(1, 4, 3, 3)) * 0.3).astype(_dt())

    params = {name: p for name, p in head.parameters().items()
              if "mask" not in name and name != "reg.pred.weight" and name != "reg.pred.bias"}
    # lift every gradient entry off zero: near-zero coordinates otherwise sit
    # below the relative-error floor. At float32 a perturbation re-rounds the
    # whole downstream cascade, so the lift (and step) must be larger.
    lift_scale = 0.3 if _is32() else 0.01
    lift_rng = np.random.default_rng(99)
    lifts = {name: _signs(lift_rng, p.data.shape, lift_scale) for name, p in params.items()}

    def f():
        step = head.forward_train(feats, labels, np.random.default_rng(7), LossWeights())
        loss = step.losses["total"]
        for name, lift in lifts.items():
            loss = loss + (params[name] * lift).sum()
        return loss

    h = 3e-3 if _is32() else 1e-7  # f64 step small enough to dodge relu kinks
    return grad_check(f, list(params.values()), h=h)


SUITE = {
    "conv2d": check_conv2d,
    "pointwise_conv": check_pointwise_conv,
    "context_group_norm": check_context_group_norm,
    "train_mask_surrogate": check_train_mask_surrogate,
    "norm_loss": check_norm_loss,
    "amm_loss": check_amm_loss,
    "det_loss_surrogate": check_det_loss_surrogate,
    "end_to_end": check_end_to_end,
}


def gradcheck_suite(dtype="float32") -> dict[str, float]:
    """Run every check under the given precision; returns max relative errors."""
    with precision(dtype):
        return {name: fn() for name, fn in SUITE.items()}


def suite_threshold(dtype) -> float:
    return THRESHOLDS[np.dtype(dtype)]
