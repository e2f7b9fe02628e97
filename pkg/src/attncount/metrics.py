"""Counting and density-map quality metrics.

All maps are compared at the source image resolution.  Predictions arrive at
1/4 scale, are clamped at zero, upsampled bilinearly and then rescaled so the
upsampling does not change their integral.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .synthdata import DensityMap
from .tensor import ShapeError, Tensor, bilinear_resize

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EPS = 1e-8
GAME_LEVELS = (0, 1, 2, 3)


@dataclass
class EvalRecord:
    predicted_count: float
    gt_count: float
    pred_map_fullres: DensityMap
    gt_map_fullres: DensityMap

    @property
    def pred(self) -> np.ndarray:
        return self.pred_map_fullres.array()

    @property
    def gt(self) -> np.ndarray:
        return self.gt_map_fullres.array()


def _as_map(arr: np.ndarray) -> DensityMap:
    return DensityMap(Tensor(np.asarray(arr, dtype=np.float64)[None, None]), 1)


def record_from_fullres(pred: np.ndarray, gt: np.ndarray) -> EvalRecord:
    """Record for two maps already at source resolution (prediction clamped at 0)."""
    pred = np.maximum(np.asarray(pred, dtype=np.float64), 0.0)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"map shapes differ: {pred.shape} vs {gt.shape}")
    return EvalRecord(float(pred.sum()), float(gt.sum()), _as_map(pred), _as_map(gt))


def prepare_record(pred: DensityMap, gt_fullres: DensityMap) -> EvalRecord:
    ph, pw = pred.shape
    gh, gw = gt_fullres.shape
    if (ph * 4, pw * 4) != (gh, gw):
        raise ShapeError(f"prediction {ph}x{pw} is not 1/4 of ground truth {gh}x{gw}")
    p = np.maximum(pred.array().astype(np.float64), 0.0)
    total = p.sum()
    up = bilinear_resize(Tensor(p[None, None]), gh, gw).data[0, 0]
    resized = up.sum()
    if resized > 0:
        up = up * (total / resized)
    return record_from_fullres(up, gt_fullres.array())


def _require(records) -> list[EvalRecord]:
    records = list(records)
    if not records:
        raise ValueError("metrics need at least one record")
    return records


def mae(records) -> float:
    records = _require(records)
    return float(np.mean([abs(r.predicted_count - r.gt_count) for r in records]))


def mse(records) -> float:
    """Root of the mean squared count error (the usual crowd-counting "MSE")."""
    records = _require(records)
    return float(np.sqrt(np.mean([(r.predicted_count - r.gt_count) ** 2 for r in records])))


def psnr(record: EvalRecord) -> float:
    gt, pred = record.gt, record.pred
    if gt.size == 0:
        raise ShapeError("psnr on empty maps")
    peak = max(float(gt.max()), EPS)
    err = np.mean((pred / peak - gt / peak) ** 2)
    if err == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(record: EvalRecord) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows."""
    x, y = record.pred, record.gt
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    dyn = max(float(y.max() - y.min()), EPS)
    c1 = (SSIM_K1 * dyn) ** 2
    c2 = (SSIM_K2 * dyn) ** 2
    w = gaussian_window()

    def local(a):
        return np.einsum("ijkl,kl->ij", sliding_window_view(a, w.shape), w)

    mx, my = local(x), local(y)
    vx = local(x * x) - mx * mx
    vy = local(y * y) - my * my
    cxy = local(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(smap.mean())


def _cell_edges(size: int, n: int) -> list[int]:
    step = size // n
    return [i * step for i in range(n)] + [size]


def game(records, level: int) -> float:
    """Grid average mean absolute error over a 2^L x 2^L partition."""
    if level not in GAME_LEVELS:
        raise ValueError(f"GAME level must be in {GAME_LEVELS}, got {level}")
    records = _require(records)
    n = 2 ** level
    total = 0.0
    for r in records:
        pred, gt = r.pred, r.gt
        ys, xs = _cell_edges(gt.shape[0], n), _cell_edges(gt.shape[1], n)
        err = 0.0
        for i in range(n):
            for j in range(n):
                cell = (slice(ys[i], ys[i + 1]), slice(xs[j], xs[j + 1]))
                err += abs(float(pred[cell].sum()) - float(gt[cell].sum()))
        total += err
    return total / len(records)


@dataclass
class MetricsReport:
    mae: float
    mse: float
    mean_psnr: float
    mean_ssim: float
    game: dict[int, float] = field(default_factory=dict)
    n_samples: int = 0

    def to_text(self) -> str:
        lines = [
            f"mae={self.mae:.10g}",
            f"mse={self.mse:.10g}",
            f"psnr={self.mean_psnr:.10g}",
            f"ssim={self.mean_ssim:.10g}",
        ]
        lines += [f"game{lv}={self.game[lv]:.10g}" for lv in sorted(self.game)]
        lines.append(f"n_samples={self.n_samples}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.split() if "=" in line)
        games = {int(k[4:]): float(v) for k, v in kv.items() if k.startswith("game")}
        return cls(float(kv["mae"]), float(kv["mse"]), float(kv["psnr"]), float(kv["ssim"]),
                   games, int(kv["n_samples"]))


def evaluate(records) -> MetricsReport:
    records = _require(records)
    return MetricsReport(
        mae=mae(records),
        mse=mse(records),
        mean_psnr=float(np.mean([psnr(r) for r in records])),
        mean_ssim=float(np.mean([ssim(r) for r in records])),
        game={lv: game(records, lv) for lv in GAME_LEVELS},
        n_samples=len(records),
    )
