import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attncount import tensor as T
from attncount.rng import SplitMix64
from conftest import naive_conv2d


def t64(arr, grad=False):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def randn(seed, *shape):
    return SplitMix64(seed).normal(int(np.prod(shape))).reshape(shape)


class TestConv2d:
    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 2, 2)])
    def test_matches_direct_loops(self, stride, padding, dilation):
        x, w, b = randn(1, 2, 3, 7, 6), randn(2, 4, 3, 3, 3), randn(3, 4)
        got = T.conv2d(t64(x), t64(w), t64(b), stride, padding, dilation).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, padding, dilation), atol=1e-12)

    def test_identity_kernel_is_passthrough(self):
        x = randn(4, 1, 1, 5, 5)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = T.conv2d(t64(x), t64(w), None, padding=1).data
        np.testing.assert_array_equal(out, x)

    def test_output_size_formula(self):
        assert T.conv_out_size(8, 3, 1, 1, 1) == 8
        assert T.conv_out_size(8, 3, 2, 1, 1) == 4
        assert T.conv_out_size(8, 3, 1, 2, 2) == 8
        assert T.conv_out_size(7, 5, 1, 0, 1) == 3

    def test_channel_mismatch_rejected(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))))

    def test_gradients(self):
        x, w, b = t64(randn(5, 1, 2, 6, 6)), t64(randn(6, 3, 2, 3, 3)), t64(randn(7, 3))
        r = t64(randn(8, 1, 3, 6, 6))
        f = lambda _: T.sum_all(T.mul(T.conv2d(x, w, b, padding=1), r))  # noqa: E731
        for t in (x, w, b):
            assert T.grad_check(f, t) <= 1e-6


class TestPooling:
    def test_max_pool_values(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(T.max_pool2(t64(x)).data[0, 0], [[5, 7], [13, 15]])

    def test_max_pool_tie_goes_to_first_element(self):
        x = t64(np.ones((1, 1, 2, 2)), grad=True)
        T.backward(T.sum_all(T.max_pool2(x)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_odd_size_rejected(self):
        with pytest.raises(T.ShapeError):
            T.max_pool2(t64(np.zeros((1, 1, 5, 4))))

    def test_gap_gradient_is_uniform(self):
        x = t64(randn(9, 2, 3, 4, 5), grad=True)
        T.backward(T.sum_all(T.global_avg_pool(x)))
        np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 20))


class TestSoftmaxAndLoss:
    def test_softmax_rows_sum_to_one_even_for_huge_logits(self):
        p = T.softmax(t64([[1000.0, -1000.0], [3.0, 3.0]])).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        np.testing.assert_allclose(p[1], [0.5, 0.5])
        assert np.all(np.isfinite(p))

    def test_cross_entropy_known_value(self):
        # logits (0, 0) -> log 2 regardless of label
        assert T.cross_entropy_2class(t64([[0.0, 0.0]]), [1]).item() == pytest.approx(np.log(2))
        # label 1 picks column 1
        val = T.cross_entropy_2class(t64([[0.0, 2.0]]), [1]).item()
        assert val == pytest.approx(np.log1p(np.exp(-2.0)))

    def test_cross_entropy_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            T.cross_entropy_2class(t64([[0.0, 0.0]]), [2])

    def test_cross_entropy_gradient(self):
        x = t64(randn(3, 6, 2) * 3)
        assert T.grad_check(lambda z: T.cross_entropy_2class(z, [0, 1, 1, 0, 1, 0]), x, 1e-5) <= 1e-6


class TestResize:
    def test_align_corners_endpoints(self):
        x = randn(11, 1, 1, 3, 4)
        out = T.bilinear_resize(t64(x), 7, 10).data[0, 0]
        for (i, j), (a, b) in {(0, 0): (0, 0), (0, 9): (0, 3), (6, 0): (2, 0), (6, 9): (2, 3)}.items():
            assert out[i, j] == pytest.approx(x[0, 0, a, b])

    def test_upsample_then_midpoint(self):
        x = t64(np.array([[[[0.0, 2.0]]]]))
        np.testing.assert_allclose(T.bilinear_resize(x, 1, 3).data[0, 0, 0], [0.0, 1.0, 2.0])

    def test_constant_stays_constant(self):
        out = T.bilinear_resize(t64(np.full((1, 2, 4, 4), 3.5)), 16, 9).data
        np.testing.assert_allclose(out, 3.5)

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 6), w=st.integers(1, 6), oh=st.integers(1, 9), ow=st.integers(1, 9))
    def test_resize_gradient_fuzz(self, h, w, oh, ow):
        x = t64(randn(h * 7 + w, 1, 1, h, w))
        r = t64(randn(oh * 13 + ow, 1, 1, oh, ow))
        assert T.grad_check(lambda z: T.sum_all(T.mul(T.bilinear_resize(z, oh, ow), r)), x) <= 1e-6


class TestTape:
    def test_reused_tensor_accumulates(self):
        x = t64([[[[2.0]]]], grad=True)
        T.backward(T.sum_all(T.add(T.mul(x, x), x)))  # d/dx (x^2 + x) = 2x + 1
        assert x.grad.item() == pytest.approx(5.0)

    def test_backward_requires_scalar(self):
        with pytest.raises(T.ShapeError):
            T.backward(t64(np.zeros((2,)), grad=True))

    def test_no_grad_blocks_recording(self):
        x = t64([1.0, 2.0], grad=True)
        with T.no_grad():
            y = T.sum_all(T.mul(x, x))
        assert not y.requires_grad
        T.backward(y)
        assert x.grad is None

    def test_no_broadcasting(self):
        with pytest.raises(T.ShapeError):
            T.add(t64(np.zeros((1, 2))), t64(np.zeros((2, 1))))

    def test_weighted_channel_sum(self):
        f = t64(randn(12, 2, 2, 3, 3), grad=True)
        p = t64(np.array([[0.25, 0.75], [1.0, 0.0]]), grad=True)
        out = T.weighted_channel_sum(f, p).data
        np.testing.assert_allclose(out[0, 0], 0.25 * f.data[0, 0] + 0.75 * f.data[0, 1])
        np.testing.assert_allclose(out[1, 0], f.data[1, 0])
        for t in (f, p):
            assert T.grad_check(lambda _: T.sum_all(T.mul(T.weighted_channel_sum(f, p), t64(randn(3, 2, 1, 3, 3)))), t) <= 1e-6

    def test_grad_check_requires_float64(self):
        with pytest.raises(TypeError):
            T.grad_check(T.sum_all, T.Tensor(np.zeros(3, dtype=np.float32)))

    def test_float32_stays_float32(self):
        x = T.Tensor(np.ones((1, 1, 4, 4), dtype=np.float32))
        w = T.Tensor(np.ones((2, 1, 3, 3), dtype=np.float32))
        assert T.conv2d(x, w, None, padding=1).data.dtype == np.float32
        assert T.bilinear_resize(x, 8, 8).data.dtype == np.float32
