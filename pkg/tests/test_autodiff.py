"""Tape gradients versus analytic forms and central finite differences."""

import numpy as np
import pytest

from sparsehead import autodiff
from sparsehead.autodiff import Tensor, backward, grad_check
from sparsehead.dtypes import precision
from sparsehead.errors import ContractViolation


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)).astype(np.float32))
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_mse_gradient_analytic(self):
        """loss = mean(x^2) has gradient 2x/n."""
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(3, 5)).astype(np.float32))
        backward((x * x).mean())
        np.testing.assert_allclose(x.grad, 2 * x.data / x.data.size, rtol=1e-5)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(ContractViolation):
            backward(x * 2.0)

    def test_each_node_visited_once(self):
        """A diamond-shaped graph accumulates both paths exactly once."""
        x = Tensor(np.array(3.0, dtype=np.float32))
        a = x * 2.0
        b = x * 5.0
        backward((a + b).sum())
        assert x.grad == pytest.approx(7.0)

    def test_broadcast_gradient_reduction(self):
        bias = Tensor(np.ones((1, 3, 1, 1), dtype=np.float32))
        x = Tensor(np.ones((2, 3, 4, 4), dtype=np.float32))
        backward((x + bias).sum())
        np.testing.assert_array_equal(bias.grad, np.full((1, 3, 1, 1), 32.0))


class TestGradCheck:
    def test_linear_function_near_exact(self):
        """Central differences are exact for affine maps (float64 mode)."""
        with precision(np.float64):
            rng = np.random.default_rng(2)
            p = Tensor(rng.normal(size=(4, 3)))
            coeff = rng.normal(size=(4, 3))
            err = grad_check(lambda: (p * Tensor(coeff)).sum(), [p])
        assert err < 1e-5

    def test_linear_function_float32(self):
        """At 32 bits the same check stays within the coarse tolerance."""
        rng = np.random.default_rng(2)
        p = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
        coeff = rng.normal(size=(4, 3)).astype(np.float32)
        err = grad_check(lambda: (p * Tensor(coeff)).sum(), [p])
        assert err < 1e-2

    def test_sigmoid_sum(self):
        rng = np.random.default_rng(3)
        p = Tensor(rng.normal(size=(2, 8)).astype(np.float32))
        err = grad_check(lambda: p.sigmoid().sum(), [p])
        assert err < 1e-3

    def test_softplus(self):
        rng = np.random.default_rng(4)
        p = Tensor(rng.normal(size=(2, 6)).astype(np.float32))
        probe = Tensor(rng.normal(size=(2, 6)).astype(np.float32))
        err = grad_check(lambda: (p.softplus() * probe).sum(), [p])
        assert err < 1e-2

    def test_division_and_sqrt(self):
        rng = np.random.default_rng(5)
        p = Tensor((rng.uniform(0.5, 2.0, size=(3, 3))).astype(np.float32))
        q = Tensor((rng.uniform(0.5, 2.0, size=(3, 3))).astype(np.float32))
        err = grad_check(lambda: ((p / q).sqrt()).sum(), [p, q])
        assert err < 1e-2


class TestConvGradients:
    def test_conv3x3_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)).astype(np.float32))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32) * 0.5)
        b = Tensor(rng.normal(size=3).astype(np.float32))
        probe = Tensor(rng.normal(size=(1, 3, 5, 5)).astype(np.float32))

        err = grad_check(lambda: (autodiff.conv2d(x, w, b, padding=1) * probe).sum(), [x, w, b])
        assert err < 1e-2

    def test_conv1x1_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        w = Tensor(rng.normal(size=(2, 3, 1, 1)).astype(np.float32))
        b = Tensor(rng.normal(size=2).astype(np.float32))
        probe = Tensor(rng.normal(size=(2, 2, 4, 4)).astype(np.float32))

        err = grad_check(lambda: (autodiff.conv2d(x, w, b, padding=0) * probe).sum(), [x, w, b])
        assert err < 1e-2

    def test_conv_chain_float64(self):
        """conv -> relu -> conv -> mean under float64 is clean to 1e-5."""
        with precision(np.float64):
            rng = np.random.default_rng(8)
            x = Tensor(rng.normal(size=(1, 2, 5, 5)))
            w1 = Tensor(rng.normal(size=(4, 2, 3, 3)) * 0.3)
            w2 = Tensor(rng.normal(size=(2, 4, 3, 3)) * 0.3)

            def f():
                h = autodiff.conv2d(x, w1, None, padding=1).relu()
                return (autodiff.conv2d(h, w2, None, padding=1) ** 2).mean()

            assert grad_check(f, [x, w1, w2]) < 1e-5


class TestGroupOps:
    def test_group_mean_forward(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 2, 2))
        m = autodiff.group_mean(x, 2)
        np.testing.assert_allclose(m.data, [[3.5, 11.5]])

    def test_group_mean_gradient(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float32))
        probe = Tensor(rng.normal(size=(2, 2)).astype(np.float32))
        err = grad_check(lambda: (autodiff.group_mean(x, 2) * probe).sum(), [x])
        assert err < 1e-2

    def test_repeat_groups_roundtrip_gradient(self):
        rng = np.random.default_rng(10)
        s = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
        probe = Tensor(rng.normal(size=(2, 6, 1, 1)).astype(np.float32))
        err = grad_check(lambda: (autodiff.repeat_groups(s, 6) * probe).sum(), [s])
        assert err < 1e-2

    def test_masked_group_mean_matches_subset(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 4, 4, 4)).astype(np.float32)
        mask = (rng.random((1, 1, 4, 4)) < 0.5).astype(np.float32)
        got = autodiff.masked_group_mean(Tensor(x), mask, 2).data
        sel = mask[0, 0].astype(bool)
        for g in range(2):
            want = x[0, 2 * g : 2 * g + 2, sel].mean()
            assert got[0, g] == pytest.approx(want, rel=1e-5)

    def test_masked_channel_mean_gradient(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        mask = (rng.random((2, 1, 4, 4)) < 0.6).astype(np.float32)
        probe = Tensor(rng.normal(size=(1, 3, 1, 1)).astype(np.float32))
        err = grad_check(lambda: (autodiff.masked_channel_mean(x, mask) * probe).sum(), [x])
        assert err < 1e-2


class TestFiniteOutputs:
    def test_ops_stay_finite(self):
        """Public ops keep finite inputs finite."""
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(scale=10.0, size=(2, 4, 6, 6)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 4, 3, 3)).astype(np.float32))
        y = autodiff.conv2d(x, w, None, padding=1).sigmoid().softplus().relu()
        assert np.all(np.isfinite(y.data))
