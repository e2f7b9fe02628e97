"""Deformable 2-D convolution with bilinear sampling.

Each layer owns a companion standard convolution that predicts a (dy, dx)
pair per kernel tap at every output location.  Offset channels are ordered
tap-major in row-major kernel order: channel 2t holds dy and 2t+1 holds dx for
tap t = i*k + j.  Samples falling outside the feature map read zeros, which
matches the zero padding of :func:`conv2d`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .params import NetworkParams, he_normal
from .rng import SplitMix64
from .tensor import ShapeError, Tensor, _record, as_tensor, conv2d, conv_out_size

class _Gather:
    """Bilinear lookups of x[N,C,H,W] at coordinates py, px of shape [N,S].

    The lookup is linear in x, so it is stored as a sparse [N*S, N*H*W]
    matrix with up to four entries per sample; the input gradient is its
    transpose.  Two more matrices hold the derivative of the weights with
    respect to py and px, which gives the coordinate gradients.
    """

    def __init__(self, x: np.ndarray, py: np.ndarray, px: np.ndarray):
        n, c, h, w = x.shape
        s = py.shape[1]
        self.shape = x.shape
        y0 = np.floor(py)
        x0 = np.floor(px)
        ly = py - y0
        lx = px - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        rows = np.arange(n * s).reshape(n, s)
        image_base = (np.arange(n) * (h * w))[:, None]
        weights = {
            (0, 0): ((1 - ly) * (1 - lx), -(1 - lx), -(1 - ly)),
            (0, 1): ((1 - ly) * lx, -lx, 1 - ly),
            (1, 0): (ly * (1 - lx), 1 - lx, -ly),
            (1, 1): (ly * lx, lx, ly),
        }
        r_all, c_all, w_all, wy_all, wx_all = [], [], [], [], []
        for (dy, dx), (wv, wy, wx) in weights.items():
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            r_all.append(rows[ok])
            c_all.append((image_base + yi * w + xi)[ok])
            w_all.append(wv[ok])
            wy_all.append(wy[ok])
            wx_all.append(wx[ok])
        r = np.concatenate(r_all)
        col = np.concatenate(c_all)
        size = (n * s, n * h * w)

        def mat(vals):
            return sparse.csr_matrix((np.concatenate(vals).astype(x.dtype), (r, col)), shape=size)

        self.sample = mat(w_all)
        self.d_y = mat(wy_all)
        self.d_x = mat(wx_all)
        self.x_rows = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        self.out = self._to_ncs(self.sample @ self.x_rows, n, s, c)

    @staticmethod
    def _to_ncs(rows: np.ndarray, n: int, s: int, c: int) -> np.ndarray:
        return np.ascontiguousarray(np.asarray(rows).reshape(n, s, c).transpose(0, 2, 1))

    def grad_input(self, g: np.ndarray) -> np.ndarray:
        """Scatter g[N,C,S] back onto the [N,C,H,W] grid."""
        n, c, h, w = self.shape
        g_rows = g.transpose(0, 2, 1).reshape(-1, c)
        back = np.asarray(self.sample.T @ g_rows).reshape(n, h, w, c)
        return np.ascontiguousarray(back.transpose(0, 3, 1, 2)).astype(g.dtype)

    def grad_coords(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """d(sum g*out)/d(py), d/d(px), summed over channels -> [N,S] each."""
        n, c, _, _ = self.shape
        g_rows = g.transpose(0, 2, 1).reshape(-1, c)
        gy = (np.asarray(self.d_y @ self.x_rows) * g_rows).sum(axis=1)
        gx = (np.asarray(self.d_x @ self.x_rows) * g_rows).sum(axis=1)
        return gy.reshape(n, -1), gx.reshape(n, -1)


def bilinear_sample(feature, y, x) -> Tensor:
    """Bilinear read of a single [H,W] plane at (y, x); differentiable in all three.

    Points with y outside (-1, H) or x outside (-1, W) read 0; partially
    overlapping points use zeros for the missing neighbors.
    """
    feature = as_tensor(feature)
    y = as_tensor(y, dtype=feature.dtype)
    x = as_tensor(x, dtype=feature.dtype)
    if feature.data.ndim != 2:
        raise ShapeError(f"bilinear_sample expects an [H,W] plane, got {feature.shape}")
    h, w = feature.shape
    py = y.data.reshape(1, 1).astype(np.float64)
    px = x.data.reshape(1, 1).astype(np.float64)
    gat = _Gather(feature.data.reshape(1, 1, h, w), py, px)
    out = gat.out.reshape(())

    def bw(g):
        g3 = np.asarray(g, dtype=feature.dtype).reshape(1, 1, 1)
        gy, gx = gat.grad_coords(g3)
        gf = gat.grad_input(g3).reshape(h, w)
        return gf, gy.reshape(y.shape).astype(y.dtype), gx.reshape(x.shape).astype(x.dtype)

    return _record(out, (feature, y, x), bw)


def deform_sample_conv(x: Tensor, offsets: Tensor, weight: Tensor, bias: Tensor,
                       stride: int = 1, padding: int = 0) -> Tensor:
    """Deformable convolution given an explicit offset map [N, 2k*k, H', W']."""
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeError(f"deform conv: weight {weight.shape} incompatible with input {x.shape}")
    oh = conv_out_size(h, k, stride, padding, 1)
    ow = conv_out_size(w, k, stride, padding, 1)
    taps = k * k
    if offsets.shape != (n, 2 * taps, oh, ow):
        raise ShapeError(f"deform conv: offsets {offsets.shape} != {(n, 2 * taps, oh, ow)}")
    if bias.shape != (o,):
        raise ShapeError(f"deform conv: bias {bias.shape} != ({o},)")
    off = offsets.data.reshape(n, taps, 2, oh, ow)
    ki, kj = np.divmod(np.arange(taps), k)
    gy = np.arange(oh) * stride - padding
    gx = np.arange(ow) * stride - padding
    base_y = ki[:, None, None] + gy[None, :, None]
    base_x = kj[:, None, None] + gx[None, None, :]
    py = (base_y[None] + off[:, :, 0]).reshape(n, taps * oh * ow)
    px = (base_x[None] + off[:, :, 1]).reshape(n, taps * oh * ow)
    gat = _Gather(x.data, py, px)
    cols = gat.out.reshape(n, c * taps, oh * ow)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols) + bias.data[:, None]

    def bw(g):
        g3 = g.reshape(n, o, oh * ow)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gb = g3.sum(axis=(0, 2))
        gcols = np.matmul(w2.T, g3).reshape(n, c, taps * oh * ow)
        gx_in = gat.grad_input(gcols) if x.requires_grad else None
        goff = None
        if offsets.requires_grad:
            gpy, gpx = gat.grad_coords(gcols)
            goff = np.stack([gpy.reshape(n, taps, oh, ow), gpx.reshape(n, taps, oh, ow)], axis=2)
            goff = goff.reshape(offsets.shape).astype(offsets.dtype)
        return gx_in, goff, gw, gb

    return _record(out.reshape(n, o, oh, ow), (x, offsets, weight, bias), bw)


@dataclass
class DeformConvLayer:
    weight: Tensor
    bias: Tensor
    offset_weight: Tensor
    offset_bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        o, c, k, k2 = self.weight.shape
        if k != k2 or k % 2 == 0:
            raise ShapeError(f"deformable kernel must be odd and square, got {k}x{k2}")
        if self.offset_weight.shape != (2 * k * k, c, k, k):
            raise ShapeError(f"offset_weight {self.offset_weight.shape} != {(2 * k * k, c, k, k)}")
        if self.offset_bias.shape != (2 * k * k,):
            raise ShapeError(f"offset_bias {self.offset_bias.shape} != ({2 * k * k},)")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def create(cls, params: NetworkParams, name: str, in_ch: int, out_ch: int, k: int,
               rng: SplitMix64, stride: int = 1, dtype=np.float32) -> "DeformConvLayer":
        """Register a fresh layer under ``name``; offsets start at exactly zero."""
        weight = params.add(f"{name}.weight", he_normal(rng, (out_ch, in_ch, k, k), dtype))
        bias = params.add(f"{name}.bias", np.zeros(out_ch, dtype=dtype))
        ow = params.add(f"{name}.offset_weight", np.zeros((2 * k * k, in_ch, k, k), dtype=dtype))
        ob = params.add(f"{name}.offset_bias", np.zeros(2 * k * k, dtype=dtype))
        return cls(weight, bias, ow, ob, stride=stride, padding=(k - 1) // 2)


def deform_conv2d(x: Tensor, layer: DeformConvLayer) -> Tensor:
    offsets = conv2d(x, layer.offset_weight, layer.offset_bias, stride=layer.stride, padding=layer.padding)
    return deform_sample_conv(x, offsets, layer.weight, layer.bias, layer.stride, layer.padding)
