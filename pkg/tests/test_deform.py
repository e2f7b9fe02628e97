import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attncount import tensor as T
from attncount.deform import DeformConvLayer, bilinear_sample, deform_conv2d, deform_sample_conv
from attncount.params import NetworkParams
from attncount.rng import SplitMix64


def t64(arr):
    return T.Tensor(np.asarray(arr, dtype=np.float64))


def naive_bilinear(f, y, x):
    h, w = f.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    total = 0.0
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * f[yy, xx]
    return total


def naive_deform(x, off, w, b, pad):
    """Per-tap loops: out[o,i,j] = sum w[o,c,ki,kj] * bilerp(x[c], i-pad+ki+dy, j-pad+kj+dx)."""
    _, c, h, wd = x.shape
    o, _, k, _ = w.shape
    oh, ow = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((1, o, oh, ow))
    for i in range(oh):
        for j in range(ow):
            for t in range(k * k):
                ki, kj = divmod(t, k)
                dy, dx = off[0, 2 * t, i, j], off[0, 2 * t + 1, i, j]
                for ch in range(c):
                    v = naive_bilinear(x[0, ch], i - pad + ki + dy, j - pad + kj + dx)
                    out[0, :, i, j] += w[:, ch, ki, kj] * v
    return out + b[None, :, None, None]


def _layer(seed, k, cin=2, cout=3, dtype=np.float32):
    return DeformConvLayer.create(NetworkParams(), "d", cin, cout, k, SplitMix64(seed), dtype=dtype)


class TestBilinearSample:
    def test_integer_location_reads_pixel(self):
        f = np.arange(20.0).reshape(4, 5)
        assert bilinear_sample(t64(f), t64(2.0), t64(3.0)).item() == 13.0

    def test_midpoint_averages_four_neighbours(self):
        f = np.arange(20.0).reshape(4, 5)
        assert bilinear_sample(t64(f), t64(1.5), t64(2.5)).item() == pytest.approx((7 + 8 + 12 + 13) / 4)

    def test_far_outside_is_zero(self):
        assert bilinear_sample(t64(np.ones((3, 3))), t64(-5.0), t64(1.0)).item() == 0.0

    @settings(max_examples=60, deadline=None)
    @given(y=st.floats(-1.5, 5.5), x=st.floats(-1.5, 6.5))
    def test_matches_reference(self, y, x):
        f = SplitMix64(5).normal(30).reshape(5, 6)
        assert bilinear_sample(t64(f), t64(y), t64(x)).item() == pytest.approx(naive_bilinear(f, y, x), abs=1e-12)


class TestDeformConv:
    def test_offsets_start_at_zero(self):
        layer = _layer(0, 3)
        assert not layer.offset_weight.data.any() and not layer.offset_bias.data.any()
        assert layer.offset_weight.shape == (18, 2, 3, 3)

    @pytest.mark.parametrize("k", [3, 5])
    @pytest.mark.parametrize("seed", range(5))
    def test_zero_offsets_equal_conv2d(self, k, seed):
        layer = _layer(seed, k)
        layer.bias.data[:] = SplitMix64(seed + 100).normal(3).astype(np.float32)
        x = T.Tensor(SplitMix64(seed + 200).normal(2 * 9 * 8).reshape(1, 2, 9, 8).astype(np.float32))
        ref = T.conv2d(x, layer.weight, layer.bias, padding=layer.padding).data
        assert np.max(np.abs(deform_conv2d(x, layer).data - ref)) <= 1e-5

    def test_matches_per_tap_reference(self):
        rng = SplitMix64(11)
        x = rng.normal(2 * 36).reshape(1, 2, 6, 6)
        off = rng.normal(18 * 36, std=0.7).reshape(1, 18, 6, 6)
        w, b = rng.normal(3 * 2 * 9).reshape(3, 2, 3, 3), rng.normal(3)
        got = deform_sample_conv(t64(x), t64(off), t64(w), t64(b), padding=1).data
        np.testing.assert_allclose(got, naive_deform(x, off, w, b, 1), atol=1e-12)

    def test_integer_shift_equals_shifted_conv(self):
        # every tap displaced by dx=+1 reads the input shifted one column left
        rng = SplitMix64(12)
        x = rng.normal(36).reshape(1, 1, 6, 6)
        w, b = rng.normal(9).reshape(1, 1, 3, 3), np.zeros(1)
        off = np.zeros((1, 18, 6, 6))
        off[:, 1::2] = 1.0
        got = deform_sample_conv(t64(x), t64(off), t64(w), t64(b), padding=1).data
        shifted = np.zeros_like(x)
        shifted[..., :-1] = x[..., 1:]
        ref = T.conv2d(t64(shifted), t64(w), t64(b), padding=1).data
        # column 0: the left tap reads real pixel x[0] instead of the zero pad
        np.testing.assert_allclose(got[..., 1:], ref[..., 1:], atol=1e-12)

    def test_gradients_including_offsets(self):
        rng = SplitMix64(13)
        layer = _layer(13, 3, dtype=np.float64)
        layer.offset_weight.data[:] = rng.normal(layer.offset_weight.data.size, std=0.3).reshape(layer.offset_weight.shape)
        layer.offset_bias.data[:] = rng.normal(18, std=0.5)
        x = t64(rng.normal(72).reshape(1, 2, 6, 6))
        r = t64(rng.normal(3 * 36).reshape(1, 3, 6, 6))
        f = lambda _: T.sum_all(T.mul(deform_conv2d(x, layer), r))  # noqa: E731
        for t in (x, layer.weight, layer.offset_weight, layer.offset_bias):
            assert T.grad_check(f, t, h=1e-6) <= 1e-4

    def test_even_kernel_rejected(self):
        with pytest.raises(T.ShapeError):
            _layer(0, 4)

    def test_offset_shape_checked(self):
        with pytest.raises(T.ShapeError):
            deform_sample_conv(t64(np.zeros((1, 1, 4, 4))), t64(np.zeros((1, 9, 4, 4))),
                               t64(np.zeros((1, 1, 3, 3))), t64(np.zeros(1)), padding=1)
