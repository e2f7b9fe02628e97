"""Density map estimator and the four attention-injection variants.

Variants:
    DME            raw image in
    AMG-DME        image * attention
    AMG-bAttn-DME  image * binarize(attention, t)
    AMG-attn-DME   raw image through the front end, features * resized attention

The attention network is always frozen here: its maps are computed without
recording a graph and its parameters never reach the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .amg import AmgNetwork, attention_maps, binarize_attention
from .deform import DeformConvLayer, deform_conv2d
from .layers import DOWNSAMPLE, FRONT_END_CHANNELS, ConvLayer, FrontEnd
from .params import NetworkParams, TrainConfig, adam_step
from .rng import SplitMix64, derive_seed
from .synthdata import DensityMap, SceneSample, crop_patches, downsample_density
from .tensor import (
    ShapeError,
    Tensor,
    backward,
    bilinear_resize,
    concat_channels,
    elementwise_mul,
    mul,
    no_grad,
    relu,
    scale_channels,
    sub,
    sum_all,
)

DME = "DME"
AMG_DME = "AMG-DME"
AMG_BATTN_DME = "AMG-bAttn-DME"
AMG_ATTN_DME = "AMG-attn-DME"
VARIANTS = (DME, AMG_DME, AMG_BATTN_DME, AMG_ATTN_DME)

BLOCK_WIDTH = 8
BLOCK_INPUTS = (FRONT_END_CHANNELS, 3 * BLOCK_WIDTH)


@dataclass(frozen=True)
class PipelineVariant:
    kind: str = DME
    threshold: float = 0.1

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")

    @property
    def uses_amg(self) -> bool:
        return self.kind != DME


class DeformBlock:
    """Parallel Dconv3-8-1, Dconv5-8-1 and Conv1-8-1 branches, concatenated."""

    def __init__(self, params: NetworkParams, prefix: str, in_ch: int, rng: SplitMix64, dtype):
        self.d3 = DeformConvLayer.create(params, f"{prefix}.d3", in_ch, BLOCK_WIDTH, 3, rng, dtype=dtype)
        self.d5 = DeformConvLayer.create(params, f"{prefix}.d5", in_ch, BLOCK_WIDTH, 5, rng, dtype=dtype)
        self.c1 = ConvLayer.create(params, f"{prefix}.c1", in_ch, BLOCK_WIDTH, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return concat_channels([deform_conv2d(x, self.d3), deform_conv2d(x, self.d5), self.c1(x)])


class DmeNetwork:
    def __init__(self, rng_seed: int, dtype=np.float32):
        rng = SplitMix64(derive_seed(rng_seed, 0xD3))
        self.params = NetworkParams()
        self.front_end = FrontEnd(self.params, "dme.front", rng, dtype)
        self.blocks = [DeformBlock(self.params, f"dme.back.block{i + 1}", cin, rng, dtype)
                       for i, cin in enumerate(BLOCK_INPUTS)]
        self.head = ConvLayer.create(self.params, "dme.head", 3 * BLOCK_WIDTH, 1, 1, rng, dtype=dtype)

    @property
    def dtype(self):
        return self.params.entries[0].tensor.dtype

    def back_end(self, feats: Tensor) -> Tensor:
        for block in self.blocks:
            feats = relu(block(feats))
        return self.head(feats)

    def __call__(self, x: Tensor) -> Tensor:
        return self.back_end(self.front_end(x))


def build_dme(rng_seed: int) -> DmeNetwork:
    return DmeNetwork(rng_seed)


def apply_attention(image: Tensor, attention: Tensor) -> Tensor:
    if image.shape != attention.shape:
        raise ShapeError(f"attention {attention.shape} does not match image {image.shape}")
    return elementwise_mul(image, attention)


def inject_attention_features(features: Tensor, attention: Tensor) -> Tensor:
    """Resize attention to the feature grid and scale every channel by it."""
    _, _, h, w = features.shape
    if attention.shape[0] != features.shape[0] or attention.shape[1] != 1:
        raise ShapeError(f"attention {attention.shape} incompatible with features {features.shape}")
    return scale_channels(features, bilinear_resize(attention, h, w))


def _check_input(x: Tensor) -> None:
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected [N,1,H,W] input, got {x.shape}")
    if x.shape[2] % DOWNSAMPLE or x.shape[3] % DOWNSAMPLE:
        raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} must have sides divisible by {DOWNSAMPLE}")


def forward_with_attention(net: DmeNetwork, x: Tensor, variant: PipelineVariant,
                           attention: Tensor | None) -> Tensor:
    """Batched DME forward given a precomputed attention map; returns the raw [N,1,H/4,W/4] grid."""
    _check_input(x)
    if x.dtype != net.dtype:
        x = Tensor(x.data.astype(net.dtype))
    if variant.kind == DME:
        return net(x)
    if attention is None:
        raise ValueError(f"variant {variant.kind} needs an attention map")
    if attention.dtype != net.dtype:
        attention = Tensor(attention.data.astype(net.dtype))
    if variant.kind == AMG_DME:
        return net(apply_attention(x, attention))
    if variant.kind == AMG_BATTN_DME:
        return net(apply_attention(x, binarize_attention(attention, variant.threshold)))
    return net.back_end(inject_attention_features(net.front_end(x), attention))


def compute_attention(amg: AmgNetwork, x: Tensor) -> Tensor:
    with no_grad():
        return Tensor(attention_maps(amg, x)[0])


def dme_forward(net: DmeNetwork, x: Tensor, variant: PipelineVariant,
                amg: AmgNetwork | None = None) -> DensityMap:
    if variant.kind == DME:
        return DensityMap(forward_with_attention(net, x, variant, None), DOWNSAMPLE)
    if amg is None:
        raise ValueError(f"variant {variant.kind} requires a trained AMG")
    attention = compute_attention(amg, x)
    return DensityMap(forward_with_attention(net, x, variant, attention), DOWNSAMPLE)


def density_loss(pred: DensityMap, gt: DensityMap, batch_size: int) -> Tensor:
    """Half the summed squared error over the batch, divided by the batch size."""
    if pred.grid.shape != gt.grid.shape:
        raise ShapeError(f"density shapes differ: {pred.grid.shape} vs {gt.grid.shape}")
    if pred.scale != gt.scale:
        raise ShapeError(f"density scales differ: {pred.scale} vs {gt.scale}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    target = gt.grid if gt.grid.dtype == pred.grid.dtype else Tensor(gt.grid.data.astype(pred.grid.dtype))
    diff = sub(pred.grid, target)
    return mul(sum_all(mul(diff, diff)), 1.0 / (2 * batch_size))


def count_from_density(dmap: DensityMap) -> float:
    """Integral of the map with negative entries clamped to zero."""
    return float(np.maximum(dmap.grid.data, 0).sum(dtype=np.float64))


@dataclass
class PatchSet:
    inputs: np.ndarray
    attention: np.ndarray | None
    targets: np.ndarray


def build_patch_set(dataset: list[SceneSample], variant: PipelineVariant,
                    amg: AmgNetwork | None) -> PatchSet:
    """Crop/mirror every scene into 18 patches with scale-4 targets.

    Attention is computed once on each full image and cropped alongside it.
    """
    inputs, attn, targets = [], [], []
    for sample in dataset:
        if variant.uses_amg:
            a = compute_attention(amg, sample.image)
            sample = SceneSample(sample.image, sample.heads, sample.gt_density, sample.label,
                                 sample.key, sample.index, {"attention": a})
        for patch in crop_patches(sample):
            inputs.append(patch.image.data)
            targets.append(downsample_density(patch.gt_density).grid.data)
            if variant.uses_amg:
                attn.append(patch.extra["attention"].data)
    return PatchSet(np.concatenate(inputs), np.concatenate(attn) if attn else None, np.concatenate(targets))


def train_dme(net: DmeNetwork, dataset: list[SceneSample], variant: PipelineVariant,
              amg: AmgNetwork | None, config: TrainConfig, log=None,
              patches: PatchSet | None = None) -> tuple[DmeNetwork, list[float]]:
    """Adam on the density loss over augmented patches; returns per-epoch mean loss."""
    if not dataset and patches is None:
        raise ValueError("train_dme needs a non-empty dataset")
    if variant.uses_amg and amg is None:
        raise ValueError(f"variant {variant.kind} requires a trained AMG")
    if patches is None:
        patches = build_patch_set(dataset, variant, amg)
    dtype = net.dtype
    x_all = patches.inputs.astype(dtype)
    a_all = None if patches.attention is None else patches.attention.astype(dtype)
    y_all = patches.targets.astype(dtype)
    history: list[float] = []
    for epoch in range(config.epochs):
        order = SplitMix64(derive_seed(config.rng_seed, 0xD, epoch)).permutation(len(x_all))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            net.params.zero_grad()
            attention = None if a_all is None else Tensor(a_all[idx])
            pred = forward_with_attention(net, Tensor(x_all[idx]), variant, attention)
            loss = density_loss(DensityMap(pred, DOWNSAMPLE), DensityMap(Tensor(y_all[idx]), DOWNSAMPLE), len(idx))
            backward(loss)
            adam_step(net.params, config)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log:
            log(f"dme[{variant.kind}] epoch {epoch + 1}/{config.epochs} loss={history[-1]:.6f}")
    return net, history


def predict_counts(net: DmeNetwork, samples: list[SceneSample], variant: PipelineVariant,
                   amg: AmgNetwork | None = None) -> list[DensityMap]:
    """Scale-4 predictions for each full-size sample, without recording a graph."""
    out = []
    with no_grad():
        for s in samples:
            out.append(dme_forward(net, s.image, variant, amg))
    return out
