"""Attention map generator: a crowd/background classifier whose class maps become attention.

The head emits two maps, crowd then background.  Their spatial means are the
class logits; the softmax of those logits weights the two maps, and the fused
map is upsampled to the image size and min-max normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import DOWNSAMPLE, FRONT_END_CHANNELS, ConvLayer, FrontEnd
from .params import NetworkParams, TrainConfig, adam_step
from .rng import SplitMix64, derive_seed
from .synthdata import BACKGROUND, CROWD, SceneSample
from .tensor import (
    ShapeError,
    Tensor,
    backward,
    bilinear_resize,
    concat_channels,
    cross_entropy_2class,
    global_avg_pool,
    no_grad,
    relu,
    softmax,
    take_channels,
    weighted_channel_sum,
)

# (name, in, out, kernel, dilation)
BRANCH_LAYOUT = [
    ("b1", FRONT_END_CHANNELS, 8, 1, 1),
    ("b2", FRONT_END_CHANNELS, 8, 3, 1),
    ("b3", FRONT_END_CHANNELS, 8, 3, 2),
    ("b4", FRONT_END_CHANNELS, 8, 3, 3),
]
HEAD_IN = 32
# Input gain for the classifier.  Trained from scratch at the prescribed
# learning rate, the network's logits move too slowly at unit gain; see README.
INPUT_SCALE = 10.0


class AmgNetwork:
    def __init__(self, rng_seed: int, dtype=np.float32):
        rng = SplitMix64(derive_seed(rng_seed, 0xA3))
        self.params = NetworkParams()
        self.front_end = FrontEnd(self.params, "amg.front", rng, dtype, pixel_scale=INPUT_SCALE)
        self.branches = [ConvLayer.create(self.params, f"amg.back.{n}", cin, cout, k, rng, dilation=d, dtype=dtype)
                         for n, cin, cout, k, d in BRANCH_LAYOUT]
        self.head = ConvLayer.create(self.params, "amg.head", HEAD_IN, 2, 1, rng, dtype=dtype)

    @property
    def dtype(self):
        return self.params.entries[0].tensor.dtype

    def class_maps(self, images: Tensor) -> Tensor:
        """[N,2,H/4,W/4] maps; channel 0 is crowd (Fc), channel 1 background (Fb)."""
        feats = self.front_end(images)
        return self.head(concat_channels([relu(b(feats)) for b in self.branches]))

    def class_logits(self, images: Tensor) -> Tensor:
        """[N,2] spatial means ordered (background, crowd) so that label 1 == crowd."""
        return take_channels(global_avg_pool(self.class_maps(images)), [1, 0])


def build_amg(rng_seed: int) -> AmgNetwork:
    return AmgNetwork(rng_seed)


@dataclass
class AttentionBundle:
    Fc: Tensor
    Fb: Tensor
    Wc: float
    Wb: float
    Pc: float
    Pb: float
    attention: Tensor
    logits: Tensor  # (background, crowd); differentiable when the graph is live


def _check_image(image: Tensor) -> None:
    if image.data.ndim != 4 or image.shape[1] != 1:
        raise ShapeError(f"expected [N,1,H,W] grayscale input, got {image.shape}")
    _, _, h, w = image.shape
    if h < 16 or w < 16 or h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(f"image {h}x{w} must be at least 16x16 with sides divisible by {DOWNSAMPLE}")


def normalize_attention(fused: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling of [N,1,H,W] to [0,1]; a flat map becomes all ones."""
    out = np.empty_like(fused)
    for i, m in enumerate(fused):
        lo, hi = float(m.min()), float(m.max())
        if hi - lo <= 1e-6 * max(1.0, abs(hi)):
            out[i] = 1.0
        else:
            out[i] = np.clip((m - lo) / (hi - lo), 0.0, 1.0)
    return out


def attention_maps(net: AmgNetwork, images: Tensor) -> tuple[np.ndarray, Tensor, Tensor]:
    """Batched attention: returns (attention [N,1,H,W], class maps, logits)."""
    _check_image(images)
    images = Tensor(images.data.astype(net.dtype)) if images.dtype != net.dtype else images
    maps = net.class_maps(images)
    logits = take_channels(global_avg_pool(maps), [1, 0])
    probs = softmax(logits)
    # fuse with (Pc, Pb) against channels (Fc, Fb)
    fused = weighted_channel_sum(maps, take_channels(probs, [1, 0]))
    _, _, h, w = images.shape
    up = bilinear_resize(fused, h, w)
    return normalize_attention(up.data), maps, logits


def amg_forward(net: AmgNetwork, image: Tensor) -> AttentionBundle:
    if image.data.ndim == 4 and image.shape[0] != 1:
        raise ShapeError("amg_forward takes a single image; use attention_maps for batches")
    attn, maps, logits = attention_maps(net, image)
    wb, wc = (float(v) for v in logits.data[0])
    p = softmax(Tensor(logits.data)).data[0]
    return AttentionBundle(
        Fc=Tensor(maps.data[:, 0:1]), Fb=Tensor(maps.data[:, 1:2]),
        Wc=wc, Wb=wb, Pc=float(p[1]), Pb=float(p[0]),
        attention=Tensor(attn), logits=logits,
    )


def binarize_attention(attention: Tensor, t: float) -> Tensor:
    """1 where attention >= t, else 0."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    return Tensor((attention.data >= t).astype(attention.dtype))


def classify(net: AmgNetwork, image: Tensor) -> tuple[str, float]:
    """Argmax label with its softmax score; an exact tie resolves to crowd."""
    _check_image(image)
    with no_grad():
        logits = net.class_logits(Tensor(image.data.astype(net.dtype)))
    p = softmax(Tensor(logits.data.astype(np.float64))).data[0]
    pb, pc = float(p[0]), float(p[1])
    return (CROWD, pc) if pc >= pb else (BACKGROUND, pb)


def classify_batch(net: AmgNetwork, images: np.ndarray) -> np.ndarray:
    """Predicted labels as 1 (crowd) / 0 (background) for an [N,1,H,W] array."""
    with no_grad():
        logits = net.class_logits(Tensor(images.astype(net.dtype))).data
    return (logits[:, 1] >= logits[:, 0]).astype(np.int64)


def train_amg(net: AmgNetwork, positives: list[SceneSample], negatives: list[SceneSample],
              config: TrainConfig, log=None) -> tuple[AmgNetwork, list[float]]:
    """Minimize two-class cross-entropy with Adam; returns per-epoch mean loss."""
    if not positives or not negatives:
        raise ValueError("train_amg needs at least one positive and one negative sample")
    images = np.concatenate([s.image.data for s in positives + negatives]).astype(net.dtype)
    _check_image(Tensor(images[:1]))
    labels = np.array([1] * len(positives) + [0] * len(negatives), dtype=np.int64)
    history: list[float] = []
    for epoch in range(config.epochs):
        order = SplitMix64(derive_seed(config.rng_seed, 0xA, epoch)).permutation(len(labels))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            net.params.zero_grad()
            loss = cross_entropy_2class(net.class_logits(Tensor(images[idx])), labels[idx])
            backward(loss)
            adam_step(net.params, config)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log:
            log(f"amg epoch {epoch + 1}/{config.epochs} loss={history[-1]:.6f}")
    return net, history
