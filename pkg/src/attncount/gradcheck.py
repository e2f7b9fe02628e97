"""Finite-difference verification of every differentiable op, in float64.

Each check reduces the op output to a scalar with a fixed random readout
(``sum(out * R)``) so gradients are O(1) and central differences are exact
for the piecewise-linear/bilinear ops up to rounding.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .amg import AmgNetwork
from .deform import DeformConvLayer, bilinear_sample, deform_conv2d
from .dme import DmeNetwork, PipelineVariant, density_loss, forward_with_attention, inject_attention_features, DME
from .params import NetworkParams
from .rng import SplitMix64
from .synthdata import DensityMap

TOLERANCE = 1e-4
SEEDS = (0, 1, 2)
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= TOLERANCE


def _rand(rng: SplitMix64, *shape, scale: float = 1.0) -> T.Tensor:
    return T.Tensor(rng.normal(int(np.prod(shape)), std=scale).reshape(shape), dtype=F64)


def _readout(out: T.Tensor, rng: SplitMix64) -> Callable[[T.Tensor], T.Tensor]:
    r = T.Tensor(rng.normal(out.data.size).reshape(out.shape), dtype=F64)
    return lambda y: T.sum_all(T.mul(y, r))


def _check(op: Callable[[], T.Tensor], wrt: list[T.Tensor], rng: SplitMix64, h: float = 1e-3,
           sample: int | None = None) -> float:
    """Max error of d(readout(op()))/d(each tensor in wrt)."""
    with T.no_grad():
        probe = op()
    read = _readout(probe, rng)
    worst = 0.0
    for t in wrt:
        idx = None
        if sample is not None and t.data.size > sample:
            idx = [int(i) for i in SplitMix64(t.data.size).integers(0, t.data.size, sample)]
        worst = max(worst, T.grad_check(lambda _: read(op()), t, h, idx))
    return worst


def check_conv2d(seed: int) -> float:
    rng = SplitMix64(seed)
    x, w, b = _rand(rng, 1, 2, 6, 6), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
    err = _check(lambda: T.conv2d(x, w, b, stride=1, padding=1), [x, w, b], rng)
    return max(err, _check(lambda: T.conv2d(x, w, b, stride=2, padding=2, dilation=2), [x, w, b], rng))


def check_max_pool2(seed: int) -> float:
    rng = SplitMix64(seed)
    x = _rand(rng, 2, 3, 6, 8)
    return _check(lambda: T.max_pool2(x), [x], rng)


def check_global_avg_pool(seed: int) -> float:
    rng = SplitMix64(seed)
    x = _rand(rng, 2, 3, 5, 4)
    return _check(lambda: T.global_avg_pool(x), [x], rng)


def check_softmax(seed: int) -> float:
    rng = SplitMix64(seed)
    x = _rand(rng, 4, 3)
    return _check(lambda: T.softmax(x), [x], rng, h=1e-5)


def check_bilinear_resize(seed: int) -> float:
    rng = SplitMix64(seed)
    x = _rand(rng, 1, 2, 4, 5)
    return max(_check(lambda: T.bilinear_resize(x, 9, 7), [x], rng),
               _check(lambda: T.bilinear_resize(x, 2, 3), [x], rng))


def check_relu(seed: int) -> float:
    rng = SplitMix64(seed)
    # keep inputs clear of the kink
    raw = rng.normal(40)
    x = T.Tensor((np.sign(raw) * (np.abs(raw) + 0.05)).reshape(1, 2, 4, 5), dtype=F64)
    return _check(lambda: T.relu(x), [x], rng)


def check_elementwise_mul(seed: int) -> float:
    rng = SplitMix64(seed)
    a, b = _rand(rng, 1, 2, 3, 3), _rand(rng, 1, 2, 3, 3)
    return _check(lambda: T.elementwise_mul(a, b), [a, b], rng)


def check_concat_channels(seed: int) -> float:
    rng = SplitMix64(seed)
    a, b = _rand(rng, 1, 2, 3, 3), _rand(rng, 1, 3, 3, 3)
    return _check(lambda: T.concat_channels([a, b]), [a, b], rng)


def check_cross_entropy(seed: int) -> float:
    rng = SplitMix64(seed)
    x = _rand(rng, 5, 2, scale=2.0)
    labels = rng.integers(0, 2, 5)
    return T.grad_check(lambda z: T.cross_entropy_2class(z, labels), x, 1e-5)


def check_bilinear_sample(seed: int) -> float:
    rng = SplitMix64(seed)
    feat = _rand(rng, 5, 6)
    worst = 0.0
    for _ in range(4):
        # fractional locations, including partially out-of-bounds ones
        y = T.Tensor(rng.uniform(low=-0.8, high=4.8) + 0.013, dtype=F64)
        x = T.Tensor(rng.uniform(low=-0.8, high=5.8) + 0.017, dtype=F64)
        for t in (feat, y, x):
            worst = max(worst, T.grad_check(lambda _: bilinear_sample(feat, y, x), t, 1e-6))
    return worst


def _random_deform_layer(rng: SplitMix64, k: int, cin: int = 2, cout: int = 3) -> DeformConvLayer:
    params = NetworkParams()
    layer = DeformConvLayer.create(params, "d", cin, cout, k, rng, dtype=F64)
    # nonzero offsets move samples off the integer grid, where the map is smooth
    layer.offset_weight.data[:] = rng.normal(layer.offset_weight.data.size, std=0.3).reshape(layer.offset_weight.shape)
    layer.offset_bias.data[:] = rng.normal(layer.offset_bias.data.size, std=0.5).reshape(layer.offset_bias.shape)
    layer.bias.data[:] = rng.normal(cout)
    return layer


def check_deform_conv2d(seed: int) -> float:
    rng = SplitMix64(seed)
    x = _rand(rng, 1, 2, 6, 6)
    layer = _random_deform_layer(rng, 3)
    wrt = [x, layer.weight, layer.bias, layer.offset_weight, layer.offset_bias]
    return _check(lambda: deform_conv2d(x, layer), wrt, rng, h=1e-6)


def check_density_loss(seed: int) -> float:
    rng = SplitMix64(seed)
    pred, gt = _rand(rng, 2, 1, 4, 4), _rand(rng, 2, 1, 4, 4)
    return T.grad_check(lambda p: density_loss(DensityMap(p, 4), DensityMap(gt, 4), 2), pred, 1e-3)


def check_inject_attention(seed: int) -> float:
    rng = SplitMix64(seed)
    feats = _rand(rng, 1, 3, 4, 4)
    attn = T.Tensor(rng.uniform(256).reshape(1, 1, 16, 16), dtype=F64)
    return _check(lambda: inject_attention_features(feats, attn), [feats, attn], rng)


def check_amg_classification(seed: int) -> float:
    rng = SplitMix64(seed)
    net = AmgNetwork(seed, dtype=F64)
    for _, p in net.params:
        p.data += rng.normal(p.data.size, std=0.05).reshape(p.shape)
    image = T.Tensor(rng.uniform(256).reshape(1, 1, 16, 16), dtype=F64)
    label = [int(rng.integers(0, 2))]
    loss = lambda: T.cross_entropy_2class(net.class_logits(image), label)  # noqa: E731
    worst = T.grad_check(lambda _: loss(), image, 1e-5, range(0, 256, 7))
    for name, p in net.params:
        idx = [int(i) for i in SplitMix64(seed + len(name)).integers(0, p.data.size, 3)]
        worst = max(worst, T.grad_check(lambda _: loss(), p, 1e-5, idx))
    return worst


def check_dme_density_path(seed: int) -> float:
    rng = SplitMix64(seed)
    net = DmeNetwork(seed, dtype=F64)
    for name, p in net.params:
        if name.endswith("offset_weight"):
            p.data[:] = rng.normal(p.data.size, std=0.05).reshape(p.shape)
        elif name.endswith("offset_bias"):
            p.data[:] = rng.normal(p.data.size, std=0.3).reshape(p.shape)
    image = T.Tensor(rng.uniform(256).reshape(1, 1, 16, 16), dtype=F64)
    gt = T.Tensor(rng.uniform(16).reshape(1, 1, 4, 4) * 0.1, dtype=F64)
    variant = PipelineVariant(DME)

    def loss():
        pred = forward_with_attention(net, image, variant, None)
        return density_loss(DensityMap(pred, 4), DensityMap(gt, 4), 1)

    worst = 0.0
    for name, p in net.params:
        idx = [int(i) for i in SplitMix64(seed + len(name)).integers(0, p.data.size, 3)]
        worst = max(worst, T.grad_check(lambda _: loss(), p, 1e-5, idx))
    return worst


CHECKS: list[tuple[str, Callable[[int], float], tuple[int, ...]]] = [
    ("conv2d", check_conv2d, SEEDS),
    ("max_pool2", check_max_pool2, SEEDS),
    ("global_avg_pool", check_global_avg_pool, SEEDS),
    ("softmax", check_softmax, SEEDS),
    ("bilinear_resize", check_bilinear_resize, SEEDS),
    ("relu", check_relu, SEEDS),
    ("elementwise_mul", check_elementwise_mul, SEEDS),
    ("concat_channels", check_concat_channels, SEEDS),
    ("cross_entropy_2class", check_cross_entropy, SEEDS),
    ("bilinear_sample", check_bilinear_sample, SEEDS),
    ("deform_conv2d", check_deform_conv2d, SEEDS),
    ("density_loss", check_density_loss, SEEDS),
    ("inject_attention_features", check_inject_attention, SEEDS),
    ("amg_classification_path", check_amg_classification, (0,)),
    ("dme_density_loss_path", check_dme_density_path, (0,)),
]


def run_suite(log=print) -> list[CheckResult]:
    results = []
    for name, fn, seeds in CHECKS:
        start = time.perf_counter()
        err = max(fn(s) for s in seeds)
        res = CheckResult(name, err, time.perf_counter() - start)
        results.append(res)
        if log:
            log(f"{name:<28} max_rel_err={err:.3e}  {'PASS' if res.passed else 'FAIL'}  ({res.seconds:.2f}s)")
    return results
