"""Small layer wrappers shared by both networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import NetworkParams, he_normal
from .rng import SplitMix64
from .tensor import Tensor, add, conv2d, max_pool2, mul, relu


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    padding: int = 0
    dilation: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding, dilation=self.dilation)

    @classmethod
    def create(cls, params: NetworkParams, name: str, in_ch: int, out_ch: int, k: int,
               rng: SplitMix64, dilation: int = 1, dtype=np.float32) -> "ConvLayer":
        # "same" padding for odd kernels
        w = params.add(f"{name}.weight", he_normal(rng, (out_ch, in_ch, k, k), dtype))
        b = params.add(f"{name}.bias", np.zeros(out_ch, dtype=dtype))
        return cls(w, b, padding=dilation * (k - 1) // 2, dilation=dilation)


# (name, in, out, kernel); "pool" entries are 2x2 max pools
FRONT_END_LAYOUT = [
    ("conv1", 1, 16, 3),
    ("conv2", 16, 16, 3),
    "pool",
    ("conv3", 16, 32, 3),
    ("conv4", 32, 32, 3),
    "pool",
]
FRONT_END_CHANNELS = 32
DOWNSAMPLE = 4
# input standardization applied before the first convolution: (x - mean) * scale
PIXEL_MEAN = 0.5
PIXEL_SCALE = 1.0


class FrontEnd:
    """Conv3-16, Conv3-16, pool, Conv3-32, Conv3-32, pool, all ReLU; 4x downsampling."""

    def __init__(self, params: NetworkParams, prefix: str, rng: SplitMix64, dtype=np.float32,
                 pixel_scale: float = PIXEL_SCALE):
        self.pixel_scale = pixel_scale
        self.steps: list[ConvLayer | None] = []
        for entry in FRONT_END_LAYOUT:
            if entry == "pool":
                self.steps.append(None)
            else:
                name, cin, cout, k = entry
                self.steps.append(ConvLayer.create(params, f"{prefix}.{name}", cin, cout, k, rng, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        x = mul(add(x, -PIXEL_MEAN), self.pixel_scale)
        for layer in self.steps:
            x = max_pool2(x) if layer is None else relu(layer(x))
        return x
