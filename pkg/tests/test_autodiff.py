"""Tensor/autodiff contracts: forward values against closed forms and the
naive-loop convolution oracle, gradients against central finite
differences, and the graph lifecycle rules."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import uqsr.autodiff as ad
from uqsr.autodiff import Tensor, no_grad
from uqsr.backend import conv3d_reference
from uqsr.errors import ContractError, DimensionError, GeometryError, StateError
from uqsr.gradcheck import finite_diff_check


class TestConv3d:
    def test_all_ones_kernel_sums_receptive_field(self):
        x = Tensor(np.ones((1, 3, 3, 3, 1)))
        w = Tensor(np.ones((3, 3, 3, 1, 1)))
        b = Tensor(np.zeros(1))
        out = ad.conv3d(x, w, b)
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.data.reshape(()) == pytest.approx(27.0)

    def test_pointwise_kernel_scales(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1, 1))
        w = Tensor(np.full((1, 1, 1, 1, 1), 2.0))
        out = ad.conv3d(x, w, Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data.reshape(3), [2.0, 4.0, 6.0])

    def test_matches_naive_loop_oracle(self, rng):
        x = rng.standard_normal((1, 5, 5, 5, 2))
        w = rng.standard_normal((3, 3, 3, 2, 3))
        b = rng.standard_normal(3)
        ref = conv3d_reference(x, w, b)
        out = ad.conv3d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_channel_mismatch_raises(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 4, 4, 2)))
        w = Tensor(rng.standard_normal((3, 3, 3, 5, 3)))
        with pytest.raises(DimensionError):
            ad.conv3d(x, w)

    def test_kernel_exceeding_extent_raises(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 4, 1)))
        w = Tensor(rng.standard_normal((3, 3, 3, 1, 1)))
        with pytest.raises(GeometryError):
            ad.conv3d(x, w)


class TestElementwise:
    def test_softplus_closed_forms(self):
        x = Tensor(np.array([0.0]))
        assert x.softplus().data[0] == pytest.approx(np.log(2.0), abs=1e-12)
        big = Tensor(np.array([50.0]))
        assert big.softplus().data[0] == pytest.approx(50.0, abs=1e-12)

    def test_relu_definition(self):
        x = Tensor(np.array([-3.0, 3.0]))
        np.testing.assert_array_equal(x.relu().data, [0.0, 3.0])

    @given(st.floats(-80, 80))
    @settings(max_examples=60, deadline=None)
    def test_softplus_positive_and_monotone(self, v):
        a = Tensor(np.array([v, v + 1e-3]))
        y = a.softplus().data
        assert y[0] > 0
        assert y[1] > y[0]

    def test_division_by_zero_sets_fault(self):
        out = Tensor(np.array([1.0])) / Tensor(np.array([0.0]))
        assert np.isinf(out.data[0])
        assert out.fault and out.has_fault()

    def test_broadcast_incompatible_raises(self):
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


class TestReduce:
    def test_mean_simple(self):
        assert Tensor(np.array([1.0, 2.0, 3.0])).mean().data == pytest.approx(2.0)

    def test_sum_all_axes(self):
        assert Tensor(np.ones((2, 3))).sum().data == pytest.approx(6.0)

    def test_mean_over_axis(self):
        out = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])).mean(axis=0)
        np.testing.assert_allclose(out.data, [2.0, 3.0])

    def test_empty_axis_tuple_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(x.sum(axis=()).data, x.data)


class TestBackward:
    def test_linear_loss_grad_is_coefficient(self, rng):
        x = rng.standard_normal(5)
        w = Tensor(rng.standard_normal(5), requires_grad=True)
        (w * Tensor(x)).sum().backward()
        np.testing.assert_allclose(w.grad, x)

    def test_power_rule(self):
        w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        w.square().sum().backward()
        np.testing.assert_allclose(w.grad, [2.0, -4.0])

    def test_two_layer_conv_matches_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 5, 5, 2)))
        w1 = Tensor(rng.standard_normal((3, 3, 3, 2, 3)), requires_grad=True)
        b1 = Tensor(rng.standard_normal(3), requires_grad=True)
        w2 = Tensor(rng.standard_normal((3, 3, 3, 3, 2)), requires_grad=True)
        b2 = Tensor(rng.standard_normal(2), requires_grad=True)

        def f():
            return ad.conv3d(ad.conv3d(x, w1, b1).relu(), w2, b2).square().sum()

        assert finite_diff_check(f, [w1, b1, w2, b2]) < 1e-4

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_second_backward_is_state_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = x.square().sum()
        loss.backward()
        with pytest.raises(StateError):
            loss.backward()

    def test_adjoint_linearity(self, rng):
        # backward of (loss1 + loss2) == backward of each, summed
        xv = rng.standard_normal(7)
        w = Tensor(xv.copy(), requires_grad=True)
        (w.square().sum() + (w * 3.0).sum()).backward()
        combined = w.grad.copy()
        w.zero_grad()
        w2 = Tensor(xv.copy(), requires_grad=True)
        w2.square().sum().backward()
        g1 = w2.grad.copy()
        w3 = Tensor(xv.copy(), requires_grad=True)
        (w3 * 3.0).sum().backward()
        np.testing.assert_allclose(combined, g1 + w3.grad, atol=1e-12)

    def test_grad_accumulates_across_graphs(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        w.square().sum().backward()
        w.square().sum().backward()
        np.testing.assert_allclose(w.grad, [8.0])

    def test_no_grad_disables_recording(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            out = w.square().sum()
        assert out._backward is None and not out.requires_grad


class TestFiniteDiffHarness:
    def test_exact_quadratic(self, rng):
        w = Tensor(rng.standard_normal(6), requires_grad=True)
        err = finite_diff_check(lambda: (w.square().sum() * 0.5), [w])
        assert err < 1e-10

    def test_detects_corrupted_gradient(self, rng):
        w = Tensor(rng.standard_normal(6), requires_grad=True)

        def crooked():
            out = Tensor(0.5 * (w.data ** 2).sum())
            out._record((w,), lambda g: w._accumulate(g * w.data * 1.1))
            return out

        assert finite_diff_check(crooked, [w]) > 0.04

    def test_nondeterministic_function_flagged(self, rng):
        w = Tensor(rng.standard_normal(3), requires_grad=True)
        state = {"n": 0}

        def noisy():
            state["n"] += 1
            return (w * float(state["n"])).sum()

        with pytest.raises(ContractError):
            finite_diff_check(noisy, [w])


class TestShuffle:
    def test_r1_identity(self, rng):
        x = rng.standard_normal((2, 3, 3, 3, 5))
        out = ad.shuffle3d(Tensor(x), 1)
        np.testing.assert_array_equal(out.data, x)

    def test_block_index_enumeration(self):
        # single low-res voxel, 8 channels -> 2x2x2 with value dx+2dy+4dz
        f = Tensor(np.arange(8.0).reshape(1, 1, 1, 1, 8))
        out = ad.shuffle3d(f, 2).data[0, :, :, :, 0]
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    assert out[i, j, k] == i + 2 * j + 4 * k

    @pytest.mark.parametrize("r", [2, 3])
    def test_unshuffle_inverts(self, r, rng):
        x = rng.standard_normal((2, 2, 3, 2, 4 * r ** 3)).astype(np.float32)
        y = ad.shuffle3d(Tensor(x), r)
        back = ad.unshuffle3d(y, r)
        np.testing.assert_array_equal(back.data, x)

    def test_channels_not_divisible_raises(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 2, 2, 7)))
        with pytest.raises(GeometryError):
            ad.shuffle3d(x, 2)

    def test_shuffle_gradients(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 2, 2, 8)), requires_grad=True)
        mix = rng.standard_normal((1, 4, 4, 4, 1))
        err = finite_diff_check(
            lambda: (ad.shuffle3d(x, 2) * Tensor(mix)).square().sum(), [x]
        )
        assert err < 1e-4
