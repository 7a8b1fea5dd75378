import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sknas import tensor_core as tc
from sknas.oracle import reference_depthwise_conv, reference_pointwise_conv
from sknas.tensor_core import Tensor


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


class TestConvDepthwise:
    def test_identity_kernel(self):
        x = rand((1, 1, 4, 4), 3)
        w = np.zeros((1, 3, 3))
        w[0, 1, 1] = 1.0
        out = tc.conv2d_depthwise(Tensor(x), Tensor(w), 1)
        assert np.array_equal(out.data, x)

    def test_all_ones_center(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 3, 3))
        out = tc.conv2d_depthwise(Tensor(x), Tensor(w), 1)
        assert out.data[0, 0, 1, 1] == 9.0

    @pytest.mark.parametrize("k", [3, 5])
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("h", [5, 6, 8])
    def test_against_direct_summation(self, k, stride, h):
        x = rand((1, 2, h, h), seed=h * k + stride)
        w = rand((2, k, k), seed=h + k * stride)
        out = tc.conv2d_depthwise(Tensor(x), Tensor(w), stride)
        ref = reference_depthwise_conv(x, w, stride)
        assert out.shape == ref.shape
        assert np.abs(out.data - ref).max() < 1e-12

    def test_output_geometry_is_ceil(self):
        for h, stride, want in [(8, 2, 4), (7, 2, 4), (8, 1, 8)]:
            x = rand((1, 1, h, h))
            out = tc.conv2d_depthwise(Tensor(x), Tensor(rand((1, 3, 3))), stride)
            assert out.shape[2] == want

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(tc.ShapeError, match="channel"):
            tc.conv2d_depthwise(Tensor(rand((1, 2, 4, 4))), Tensor(rand((3, 3, 3))), 1)

    def test_even_kernel_rejected(self):
        with pytest.raises(tc.ShapeError, match="odd"):
            tc.conv2d_depthwise(Tensor(rand((1, 1, 4, 4))), Tensor(rand((1, 4, 4))), 1)

    def test_gradients_match_finite_differences(self):
        x = rand((1, 2, 5, 5), 11)
        w = Tensor(rand((2, 5, 5), 12), requires_grad=True)

        def f(wt):
            y = tc.conv2d_depthwise(Tensor(x), wt, 2)
            return tc.tsum(tc.mul(y, y))

        assert tc.finite_difference_check(f, w) < 1e-4


class TestConvPointwise:
    def test_identity_matrix(self):
        x = rand((2, 3, 4, 4), 5)
        out = tc.conv2d_pointwise(Tensor(x), Tensor(np.eye(3)))
        assert np.abs(out.data - x).max() == 0.0

    def test_channel_sum(self):
        x = rand((1, 2, 3, 3), 6)
        out = tc.conv2d_pointwise(Tensor(x), Tensor(np.ones((1, 2))))
        assert np.allclose(out.data[:, 0], x[:, 0] + x[:, 1], atol=1e-15)

    def test_against_direct_summation(self):
        x = rand((2, 4, 5, 5), 7)
        w = rand((3, 4), 8)
        out = tc.conv2d_pointwise(Tensor(x), Tensor(w))
        assert np.abs(out.data - reference_pointwise_conv(x, w)).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(tc.ShapeError, match="channel"):
            tc.conv2d_pointwise(Tensor(rand((1, 2, 4, 4))), Tensor(rand((3, 5))))


class TestStandardOps:
    def test_relu6_clamp(self):
        out = tc.relu6(Tensor([-1.0, 3.0, 7.0]))
        assert out.data.tolist() == [0.0, 3.0, 6.0]

    def test_uniform_softmax_cross_entropy(self):
        logits = Tensor(np.zeros((2, 4)))
        loss = tc.softmax_cross_entropy(logits, np.array([0, 3]))
        assert loss.item() == pytest.approx(1.3862943611198906, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            tc.softmax_cross_entropy(Tensor(np.zeros((1, 4))), np.array([4]))

    def test_global_avg_pool_mean(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert tc.global_avg_pool(x).data.tolist() == [[2.5]]

    def test_channel_affine(self):
        x = rand((1, 2, 2, 2), 9)
        out = tc.channel_affine(Tensor(x), Tensor([2.0, 3.0]), Tensor([1.0, -1.0]))
        want = x * np.array([2.0, 3.0])[None, :, None, None] + np.array([1.0, -1.0])[None, :, None, None]
        assert np.allclose(out.data, want, atol=1e-15)

    def test_dense(self):
        x = np.array([[1.0, 2.0]])
        w = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = tc.dense(Tensor(x), Tensor(w), Tensor([10.0, 20.0]))
        assert out.data.tolist() == [[11.0, 22.0]]

    def test_clamp_min_gradient_zero_below_floor(self):
        x = Tensor(np.float64(0.5), requires_grad=True)
        with tc.Tape() as tape:
            y = tc.clamp_min(x, 1.0)
            tc.backward(y, tape)
        assert y.item() == 1.0
        assert float(x.grad) == 0.0


class TestBackward:
    def test_sum_of_squares_gradient(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with tc.Tape() as tape:
            tc.backward(tc.tsum(tc.mul(w, w)), tape)
        assert w.grad.tolist() == [2.0, 4.0, 6.0]

    def test_sum_gradient_is_ones(self):
        w = Tensor([1.0, -2.0, 5.0], requires_grad=True)
        with tc.Tape() as tape:
            tc.backward(tc.tsum(w), tape)
        assert w.grad.tolist() == [1.0, 1.0, 1.0]

    def test_accumulation_without_zeroing(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with tc.Tape() as tape:
            tc.backward(tc.tsum(w), tape)
            tc.backward(tc.tsum(w), tape)
        assert w.grad.tolist() == [2.0, 2.0]

    def test_backward_twice_deterministic(self):
        w = Tensor(rand((3, 4), 13), requires_grad=True)
        x = rand((2, 3), 14)

        def run():
            w.zero_grad()
            with tc.Tape() as tape:
                y = tc.dense(Tensor(x), w, Tensor(np.zeros(4)))
                tc.backward(tc.tsum(tc.mul(y, y)), tape)
            return w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_non_scalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with tc.Tape() as tape:
            y = tc.mul(w, w)
            with pytest.raises(tc.ShapeError, match="scalar"):
                tc.backward(y, tape)

    def test_diamond_dependency(self):
        # y used twice: d/dw of (sum(w*w) + sum(w*w)) = 4w
        w = Tensor([1.0, 3.0], requires_grad=True)
        with tc.Tape() as tape:
            y = tc.tsum(tc.mul(w, w))
            tc.backward(tc.add(y, y), tape)
        assert w.grad.tolist() == [4.0, 12.0]

    def test_composite_graph_vs_finite_differences(self):
        x = rand((2, 2, 6, 6), 15)
        w = Tensor(rand((2, 3, 3), 16), requires_grad=True)
        scale = Tensor(np.array([1.3, 0.7]))
        dense_w = Tensor(rand((2, 3), 17))

        def f(wt):
            h = tc.conv2d_depthwise(Tensor(x), wt, 2)
            h = tc.channel_affine(h, scale)
            h = tc.global_avg_pool(h)
            h = tc.dense(h, dense_w, Tensor(np.zeros(3)))
            return tc.softmax_cross_entropy(h, np.array([0, 2]))

        assert tc.finite_difference_check(f, w) < 1e-4


class TestFiniteDifferenceCheck:
    def test_quadratic(self):
        w = Tensor([0.5, -1.5], requires_grad=True)
        err = tc.finite_difference_check(lambda t: tc.tsum(tc.mul(t, t)), w, 1e-5)
        assert err < 1e-6

    def test_linear_is_near_exact(self):
        w = Tensor([0.5, -1.5, 2.0], requires_grad=True)
        err = tc.finite_difference_check(lambda t: tc.tsum(t), w, 1e-5)
        assert err < 1e-8

    def test_rejects_nondeterministic_function(self):
        state = {"calls": 0}

        def f(t):
            state["calls"] += 1
            return tc.mul(tc.tsum(t), float(state["calls"]))

        with pytest.raises(tc.NondeterministicFunctionError):
            tc.finite_difference_check(f, Tensor([1.0], requires_grad=True))

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            tc.finite_difference_check(lambda t: tc.tsum(t), Tensor([1.0]), 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_elementwise_grads_match_fd(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal(4), requires_grad=True)

    def f(t):
        return tc.tsum(tc.mul(tc.add(tc.mul(t, t), 0.5), t))

    assert tc.finite_difference_check(f, w) < 1e-4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]))
def test_property_conv_matches_reference(seed, stride):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 3, 8, 8))
    w = rng.standard_normal((3, 5, 5))
    out = tc.conv2d_depthwise(Tensor(x), Tensor(w), stride)
    assert np.abs(out.data - reference_depthwise_conv(x, w, stride)).max() < 1e-12
