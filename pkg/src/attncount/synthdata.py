"""Deterministic synthetic crowd scenes and their ground-truth densities.

A crowd scene is a grayscale field with a smooth illumination gradient and
pixel noise, a few "tree" distractors (striped canopies on a thin trunk), and
dark soft-edged head discs grouped into clusters.  Head radius grows toward
the bottom of the frame as a crude perspective cue.  Background scenes are
drawn from the same generator without heads.

Everything is a pure function of ``CorpusConfig`` and the sample index.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .rng import SplitMix64, derive_seed
from .tensor import ShapeError, Tensor

CROWD = "crowd"
BACKGROUND = "background"
LABEL_CODES = {BACKGROUND: 0, CROWD: 1}


@dataclass(frozen=True)
class CorpusConfig:
    image_size: int = 64
    train_crowd: int = 200
    train_background: int = 80
    test_crowd: int = 50
    min_heads: int = 5
    max_heads: int = 60
    head_radius_min: float = 1.2
    head_radius_max: float = 2.4
    distractor_density: float = 2.0
    test_distractor_scale: float = 2.0
    noise_amplitude: float = 0.03
    sigma: float = 2.0
    rng_seed: int = 42

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 4:
            raise ValueError(f"image_size must be a multiple of 4 and >= 16, got {self.image_size}")
        for name in ("train_crowd", "train_background", "test_crowd", "min_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_heads < self.min_heads:
            raise ValueError("max_heads must be >= min_heads")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.head_radius_min <= self.head_radius_max:
            raise ValueError("head radius range must be positive and ordered")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def with_(self, **kw) -> "CorpusConfig":
        return replace(self, **kw)


@dataclass
class DensityMap:
    grid: Tensor
    scale: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[2], self.grid.shape[3]

    def array(self) -> np.ndarray:
        return self.grid.data[0, 0]


@dataclass
class SceneSample:
    image: Tensor
    heads: np.ndarray
    gt_density: DensityMap
    label: str
    key: int = 0
    index: int = -1
    extra: dict = field(default_factory=dict)

    @property
    def count(self) -> float:
        return float(self.gt_density.grid.data.sum(dtype=np.float64))


def gt_density(heads, height: int, width: int, sigma: float) -> DensityMap:
    """Sum of per-head Gaussians, each truncated to the frame and renormalized to 1."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    heads = np.asarray(heads, dtype=np.float64).reshape(-1, 2)
    grid = np.zeros((height, width), dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    xs = np.arange(width, dtype=np.float64)
    for y, x in heads:
        gy = np.exp(-0.5 * ((ys - y) / sigma) ** 2)
        gx = np.exp(-0.5 * ((xs - x) / sigma) ** 2)
        grid += np.outer(gy / gy.sum(), gx / gx.sum())
    return DensityMap(Tensor(grid.astype(np.float32)[None, None]), scale=1)


def _poisson(rng: SplitMix64, mean: float) -> int:
    if mean <= 0:
        return 0
    limit, k, p = np.exp(-mean), 0, 1.0
    while True:
        p *= rng.uniform()
        if p <= limit:
            return k
        k += 1


def _soft_disc(yy, xx, cy, cx, r):
    return np.clip(r + 0.5 - np.hypot(yy - cy, xx - cx), 0.0, 1.0)


def _render_background(rng: SplitMix64, size: int, yy, xx) -> np.ndarray:
    level = rng.uniform(low=0.5, high=0.7)
    sy, sx = rng.uniform(2, low=-0.15, high=0.15)
    img = level + sy * (yy / (size - 1) - 0.5) + sx * (xx / (size - 1) - 0.5)
    for _ in range(2):
        cy, cx = rng.uniform(2, low=0, high=size)
        amp = rng.uniform(low=-0.06, high=0.06)
        img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 4) ** 2))
    return img


# distractor tones: striped canopies that are mid-grey, never as dark as heads
TREE_TONE = 0.5
TREE_CONTRAST = 0.14
TRUNK_TONE = 0.45


def _render_tree(rng: SplitMix64, img: np.ndarray, size: int, yy, xx) -> None:
    cy, cx = rng.uniform(2, low=0, high=size)
    radius = rng.uniform(low=3.5, high=7.0)
    angle = rng.uniform(low=0, high=np.pi)
    period = rng.uniform(low=2.2, high=3.2)
    canopy = np.clip(radius + 0.5 - np.hypot((yy - cy) / 1.3, xx - cx), 0.0, 1.0)
    stripes = np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period)
    texture = TREE_TONE + TREE_CONTRAST * stripes
    img *= 1 - canopy
    img += canopy * texture
    trunk = (np.abs(xx - cx) < 0.75) & (yy > cy + radius) & (yy < cy + 2.2 * radius)
    img[trunk] = TRUNK_TONE


def synth_scene(config: CorpusConfig, index: int, label: str, distractor_scale: float = 1.0) -> SceneSample:
    """Render scene ``index`` of class ``label``; bit-identical for equal arguments."""
    if label not in LABEL_CODES:
        raise ValueError(f"unknown label {label!r}")
    size = config.image_size
    key = derive_seed(config.rng_seed, index, LABEL_CODES[label])
    rng = SplitMix64(key)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = _render_background(rng, size, yy, xx)
    for _ in range(_poisson(rng, config.distractor_density * distractor_scale)):
        _render_tree(rng, img, size, yy, xx)

    heads = np.zeros((0, 2))
    if label == CROWD:
        n = rng.integers(config.min_heads, config.max_heads + 1)
        n_clusters = rng.integers(1, 4)
        centers = rng.uniform(2 * n_clusters, low=8, high=size - 8).reshape(n_clusters, 2)
        spreads = rng.uniform(n_clusters, low=4.0, high=11.0)
        which = rng.integers(0, n_clusters, n)
        jitter = rng.normal(2 * n).reshape(n, 2)
        heads = centers[which] + jitter * spreads[which, None]
        heads = np.clip(heads, 1.0, size - 2.0)
        shades = rng.uniform(n, low=0.05, high=0.2)
        span = config.head_radius_max - config.head_radius_min
        for (hy, hx), shade in zip(heads, shades):
            r = config.head_radius_min + span * hy / (size - 1)
            alpha = _soft_disc(yy, xx, hy, hx, r)
            img *= 1 - alpha
            img += alpha * shade

    img = img + config.noise_amplitude * rng.normal(size * size).reshape(size, size)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SceneSample(
        image=Tensor(img[None, None]),
        heads=heads,
        gt_density=gt_density(heads, size, size, config.sigma),
        label=label,
        key=key,
        index=index,
    )


# ---------------------------------------------------------------------------
# splits; index ranges are disjoint: [train crowd | train background | test crowd | held-out background]


def train_indices(config: CorpusConfig) -> list[tuple[int, str]]:
    crowd = [(i, CROWD) for i in range(config.train_crowd)]
    start = config.train_crowd
    return crowd + [(start + i, BACKGROUND) for i in range(config.train_background)]


def eval_indices(config: CorpusConfig) -> list[tuple[int, str]]:
    start = config.train_crowd + config.train_background
    return [(start + i, CROWD) for i in range(config.test_crowd)]


def train_split(config: CorpusConfig) -> list[SceneSample]:
    return [synth_scene(config, i, lab) for i, lab in train_indices(config)]


def test_split(config: CorpusConfig) -> list[SceneSample]:
    """Held-out crowd scenes with the heavier distractor load."""
    return [synth_scene(config, i, lab, config.test_distractor_scale) for i, lab in eval_indices(config)]


def heldout_backgrounds(config: CorpusConfig, n: int) -> list[SceneSample]:
    """Background scenes from an index range no split uses (for classifier evaluation)."""
    start = config.train_crowd + config.train_background + config.test_crowd
    return [synth_scene(config, start + i, BACKGROUND, config.test_distractor_scale) for i in range(n)]


# ---------------------------------------------------------------------------
# augmentation and resolution bridging


def patch_offsets(key: int, height: int, width: int) -> list[tuple[int, int]]:
    """Four quarter offsets followed by five seeded random ones."""
    ph, pw = height // 2, width // 2
    quarters = [(0, 0), (0, pw), (ph, 0), (ph, pw)]
    rng = SplitMix64(derive_seed(key, 9))
    ys = rng.integers(0, height - ph + 1, 5)
    xs = rng.integers(0, width - pw + 1, 5)
    return quarters + [(int(y), int(x)) for y, x in zip(ys, xs)]


def _crop(arr: np.ndarray, oy: int, ox: int, ph: int, pw: int, mirror: bool) -> np.ndarray:
    out = arr[..., oy:oy + ph, ox:ox + pw]
    return np.ascontiguousarray(out[..., ::-1] if mirror else out)


def crop_patches(sample: SceneSample) -> list[SceneSample]:
    """Nine half-size crops, then their horizontal mirrors: 18 patches.

    Patch ground truth is a pure crop of the full map, so a head near a crop
    edge contributes only the mass that falls inside.
    """
    _, _, h, w = sample.image.shape
    if h % 2 or w % 2:
        raise ShapeError(f"crop_patches needs even dims, got {h}x{w}")
    ph, pw = h // 2, w // 2
    plain, mirrored = [], []
    for n, (oy, ox) in enumerate(patch_offsets(sample.key, h, w)):
        heads = sample.heads
        if heads is not None and len(heads):
            inside = (heads[:, 0] >= oy) & (heads[:, 0] < oy + ph) & (heads[:, 1] >= ox) & (heads[:, 1] < ox + pw)
            heads = heads[inside] - np.array([oy, ox], dtype=np.float64)
        for mirror, bucket in ((False, plain), (True, mirrored)):
            ph_heads = heads
            if mirror and heads is not None and len(heads):
                ph_heads = np.column_stack([heads[:, 0], pw - 1 - heads[:, 1]])
            extra = {k: Tensor(_crop(v.data, oy, ox, ph, pw, mirror)) for k, v in sample.extra.items()}
            bucket.append(SceneSample(
                image=Tensor(_crop(sample.image.data, oy, ox, ph, pw, mirror)),
                heads=ph_heads,
                gt_density=DensityMap(Tensor(_crop(sample.gt_density.grid.data, oy, ox, ph, pw, mirror)), 1),
                label=sample.label,
                key=derive_seed(sample.key, 100 + n, int(mirror)),
                index=sample.index,
                extra=extra,
            ))
    return plain + mirrored


def downsample_density(dmap: DensityMap, factor: int = 4) -> DensityMap:
    """Block-sum pooling; the total is preserved."""
    n, c, h, w = dmap.grid.shape
    if h % factor or w % factor:
        raise ShapeError(f"density {h}x{w} not divisible by {factor}")
    blocks = dmap.grid.data.reshape(n, c, h // factor, factor, w // factor, factor)
    return DensityMap(Tensor(blocks.sum(axis=(3, 5), dtype=np.float64).astype(np.float32)), dmap.scale * factor)
