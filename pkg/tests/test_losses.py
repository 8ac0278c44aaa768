"""Ratio targets, mask-ratio loss, focal surrogate, total composition."""

import math

import numpy as np
import pytest

from sparsehead.autodiff import Tensor, grad_check
from sparsehead.errors import ContractViolation
from sparsehead.losses import (
    LevelLabels,
    LossWeights,
    RatioMode,
    amm_loss,
    det_loss_surrogate,
    global_target,
    target_ratio,
    total_loss,
)
from sparsehead.masking import HardMask, sample_gumbel_noise, train_mask


def labels_from(ids, c=3):
    return LevelLabels(np.asarray(ids, dtype=np.int64), c)


class TestTargetRatio:
    def test_all_background(self):
        assert target_ratio(labels_from(np.zeros((1, 5, 5)))) == 0.0

    def test_all_foreground(self):
        assert target_ratio(labels_from(np.ones((1, 4, 4)))) == 1.0

    def test_fraction(self):
        ids = np.zeros((1, 10, 10), dtype=np.int64)
        ids[0, :3, :4] = 2  # 12 of 100
        assert target_ratio(labels_from(ids)) == pytest.approx(0.12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        ids = (rng.random((1, 6, 6)) < 0.3).astype(np.int64)
        shuffled = ids.reshape(-1).copy()
        rng.shuffle(shuffled)
        assert target_ratio(labels_from(ids)) == target_ratio(labels_from(shuffled.reshape(1, 6, 6)))

    def test_monotone_in_positives(self):
        ids = np.zeros((1, 5, 5), dtype=np.int64)
        previous = target_ratio(labels_from(ids))
        for k in range(5):
            ids[0, 0, k] = 1
            current = target_ratio(labels_from(ids))
            assert current > previous
            previous = current

    def test_bad_ids_rejected(self):
        with pytest.raises(ContractViolation):
            labels_from(np.full((1, 2, 2), 7), c=3)


class TestGlobalTarget:
    def test_pooled_counts(self):
        a = labels_from(np.ones((1, 2, 2)))  # 4/4
        b = labels_from(np.zeros((1, 4, 4)))  # 0/16
        assert global_target([a, b]) == pytest.approx(4 / 20)


class TestRatioMode:
    def test_parse_roundtrip(self):
        for text in ["layerwise", "global", "fixed:0.9"]:
            assert RatioMode.parse(text).encode() == text

    def test_layerwise_targets(self):
        mode = RatioMode.parse("layerwise")
        a = labels_from(np.ones((1, 2, 2)))
        b = labels_from(np.zeros((1, 4, 4)))
        assert mode.targets([a, b]) == [1.0, 0.0]

    def test_global_targets_shared(self):
        mode = RatioMode.parse("global")
        a = labels_from(np.ones((1, 2, 2)))
        b = labels_from(np.zeros((1, 4, 4)))
        assert mode.targets([a, b]) == [pytest.approx(0.2)] * 2

    def test_fixed_targets_complement_mask_ratio(self):
        mode = RatioMode.parse("fixed:0.9")
        a = labels_from(np.ones((1, 2, 2)))
        assert mode.targets([a]) == [pytest.approx(0.1)]

    def test_invalid_rejected(self):
        with pytest.raises(ContractViolation):
            RatioMode.parse("fixed:1.5")
        with pytest.raises(ContractViolation):
            RatioMode.parse("sometimes")


def hard_mask_with_ratio(ratio, h=10, w=10):
    d = np.zeros((1, 1, h, w), dtype=bool)
    d.reshape(-1)[: int(round(ratio * h * w))] = True
    return HardMask(d)


class TestAmmLoss:
    def test_matching_ratios_zero(self):
        masks = [hard_mask_with_ratio(0.25), hard_mask_with_ratio(0.5)]
        loss = amm_loss(masks, [0.25, 0.5], 2)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_single_level_value(self):
        """activation 0.5 against target 0.12 gives 0.38^2 = 0.1444."""
        loss = amm_loss([hard_mask_with_ratio(0.5)], [0.12], 1)
        assert float(loss.data) == pytest.approx(0.1444, rel=1e-6)

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(1)
        ratios = rng.uniform(0, 1, size=4)
        targets = rng.uniform(0, 1, size=4).tolist()
        masks = [hard_mask_with_ratio(r) for r in ratios]
        realized = [m.num_active / 100 for m in masks]
        want = float(np.mean([(r - t) ** 2 for r, t in zip(realized, targets)]))
        got = float(amm_loss(masks, targets, 4).data)
        assert got == pytest.approx(want, abs=1e-6)

    def test_branch_pairs_average(self):
        pair = (hard_mask_with_ratio(0.2), hard_mask_with_ratio(0.6))
        got = float(amm_loss([pair], [0.4], 1).data)
        assert got == pytest.approx(((0.2 - 0.4) ** 2 + (0.6 - 0.4) ** 2) / 2, abs=1e-6)

    def test_training_mode_uses_soft_ratio(self):
        noise = sample_gumbel_noise((1, 1, 8, 8), seed=2)
        s = Tensor(np.random.default_rng(2).normal(size=(1, 1, 8, 8)).astype(np.float32))
        mask = train_mask(s, noise)
        got = float(amm_loss([mask], [0.3], 1).data)
        soft = float(mask.soft.data.mean())
        assert got == pytest.approx((soft - 0.3) ** 2, rel=1e-5)

    def test_gradient_through_surrogate(self):
        """FD gradient of the loss w.r.t. mask logits through the soft path.

        The lift keeps saturated-logit coordinates (surrogate derivative
        near zero) above float32 finite-difference noise; see the float64
        variant for the bare check.
        """
        rng = np.random.default_rng(3)
        s = Tensor(rng.normal(size=(1, 1, 6, 6)).astype(np.float32))
        noise = sample_gumbel_noise((1, 1, 6, 6), seed=3)
        lift = Tensor((0.01 * np.sign(rng.normal(size=(1, 1, 6, 6)))).astype(np.float32))

        def f():
            mask = train_mask(s, noise)
            return amm_loss([mask], [0.1], 1) + (s * lift).sum()

        assert grad_check(f, [s]) < 1e-2

    def test_gradient_through_surrogate_float64(self):
        from sparsehead.dtypes import precision

        with precision(np.float64):
            rng = np.random.default_rng(3)
            s = Tensor(rng.normal(size=(1, 1, 6, 6)))
            noise = sample_gumbel_noise((1, 1, 6, 6), seed=3)

            def f():
                return amm_loss([train_mask(s, noise)], [0.1], 1)

            assert grad_check(f, [s]) < 1e-5

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            amm_loss([hard_mask_with_ratio(0.5)], [0.1, 0.2], 2)


class TestDetLossSurrogate:
    def test_confident_correct_logits_near_zero_loss(self):
        rng = np.random.default_rng(4)
        ids = (rng.random((2, 6, 6)) < 0.2).astype(np.int64) * 2
        labels = labels_from(ids, c=3)
        logits = np.full((2, 3, 6, 6), -10.0, dtype=np.float32)
        logits[:, 1][ids == 2] = 10.0
        loss = det_loss_surrogate([Tensor(logits)], [labels])
        assert float(loss.data) < 1e-3

    def test_zero_logits_background_analytic(self):
        """All-zero logits on pure background: 0.75 * 0.25 * ln 2 per pixel."""
        labels = labels_from(np.zeros((1, 4, 4)), c=1)
        logits = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
        loss = det_loss_surrogate([logits], [labels])
        want = 0.75 * 0.25 * math.log(2.0)
        assert float(loss.data) == pytest.approx(want, rel=1e-5)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        ids = (rng.random((1, 5, 5)) < 0.3).astype(np.int64)
        labels = labels_from(ids, c=1)
        z = Tensor(rng.normal(size=(1, 1, 5, 5)).astype(np.float32))
        lift = Tensor((0.01 * np.sign(rng.normal(size=(1, 1, 5, 5)))).astype(np.float32))
        err = grad_check(lambda: det_loss_surrogate([z], [labels]) + (z * lift).sum(), [z])
        assert err < 1e-2

    def test_gradient_matches_finite_differences_float64(self):
        from sparsehead.dtypes import precision

        with precision(np.float64):
            rng = np.random.default_rng(5)
            ids = (rng.random((1, 5, 5)) < 0.3).astype(np.int64)
            labels = labels_from(ids, c=1)
            z = Tensor(rng.normal(size=(1, 1, 5, 5)))
            assert grad_check(lambda: det_loss_surrogate([z], [labels]), [z]) < 1e-5

    def test_channel_mismatch_rejected(self):
        labels = labels_from(np.zeros((1, 3, 3)), c=2)
        with pytest.raises(ContractViolation):
            det_loss_surrogate([Tensor(np.zeros((1, 5, 3, 3), dtype=np.float32))], [labels])


class TestTotalLoss:
    def test_zero_weights_reduce_to_det(self):
        det = Tensor(np.asarray(0.7))
        out = total_loss(det, Tensor(np.asarray(9.0)), Tensor(np.asarray(3.0)), LossWeights(0.0, 0.0))
        assert float(out.data) == pytest.approx(0.7)

    def test_shipped_default_weights(self):
        """alpha=1, beta=10 are the configured defaults."""
        w = LossWeights()
        assert (w.alpha, w.beta) == (1.0, 10.0)
        out = total_loss(0.5, 0.2, 0.01, w)
        assert float(out.data) == pytest.approx(0.8)

    def test_affine_in_each_component(self):
        w = LossWeights(alpha=2.0, beta=3.0)
        base = float(total_loss(1.0, 1.0, 1.0, w).data)
        assert float(total_loss(2.0, 1.0, 1.0, w).data) - base == pytest.approx(1.0)
        assert float(total_loss(1.0, 2.0, 1.0, w).data) - base == pytest.approx(2.0)
        assert float(total_loss(1.0, 1.0, 2.0, w).data) - base == pytest.approx(3.0)

    def test_negative_weights_rejected(self):
        with pytest.raises(ContractViolation):
            LossWeights(alpha=-1.0)
