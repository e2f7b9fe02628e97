"""Desk-scale versions of the ablation studies: variant comparison and threshold sweep.

These helpers train on the in-memory synthetic corpus (no files) and return
plain dataclasses plus fixed-width text tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .amg import AmgNetwork, build_amg, classify_batch, train_amg
from .dme import (
    AMG_BATTN_DME,
    DME,
    VARIANTS,
    DmeNetwork,
    PipelineVariant,
    build_dme,
    build_patch_set,
    predict_counts,
    train_dme,
)
from .metrics import MetricsReport, evaluate, prepare_record
from .params import TrainConfig
from .synthdata import BACKGROUND, CROWD, CorpusConfig, SceneSample, heldout_backgrounds, test_split, train_split

DEFAULT_THRESHOLDS = (0.2, 0.1, 0.0)


@dataclass
class Corpus:
    config: CorpusConfig
    train: list[SceneSample]
    test: list[SceneSample]

    @property
    def positives(self) -> list[SceneSample]:
        return [s for s in self.train if s.label == CROWD]

    @property
    def negatives(self) -> list[SceneSample]:
        return [s for s in self.train if s.label == BACKGROUND]

    @classmethod
    def build(cls, config: CorpusConfig | None = None) -> "Corpus":
        config = config or CorpusConfig()
        return cls(config, train_split(config), test_split(config))


def amg_accuracy(net: AmgNetwork, corpus: Corpus, n_backgrounds: int | None = None) -> dict[str, float]:
    """Held-out accuracy over the test crowd scenes plus unseen background scenes.

    The number of background scenes defaults to the number of test crowd
    scenes, so the set is balanced.
    """
    negatives = heldout_backgrounds(corpus.config, n_backgrounds or len(corpus.test))
    images = np.concatenate([s.image.data for s in corpus.test + negatives])
    truth = np.array([1] * len(corpus.test) + [0] * len(negatives))
    pred = classify_batch(net, images)
    k = len(corpus.test)
    return {
        "accuracy": float((pred == truth).mean()),
        "crowd_recall": float((pred[:k] == 1).mean()),
        "background_recall": float((pred[k:] == 0).mean()),
    }


def evaluate_dme(net: DmeNetwork, samples: list[SceneSample], variant: PipelineVariant,
                 amg: AmgNetwork | None = None) -> MetricsReport:
    preds = predict_counts(net, samples, variant, amg)
    return evaluate([prepare_record(p, s.gt_density) for p, s in zip(preds, samples)])


@dataclass
class AblationRow:
    variant: str
    seed: int
    report: MetricsReport
    final_loss: float


@dataclass
class AblationResult:
    rows: list[AblationRow] = field(default_factory=list)

    def mae(self, variant: str) -> dict[int, float]:
        return {r.seed: r.report.mae for r in self.rows if r.variant == variant}

    def wins(self, better: str, worse: str) -> int:
        """Seeds on which ``better`` has MAE no larger than ``worse``."""
        a, b = self.mae(better), self.mae(worse)
        return sum(a[s] <= b[s] for s in a if s in b)

    def to_text(self) -> str:
        variants = [v for v in VARIANTS if any(r.variant == v for r in self.rows)]
        seeds = sorted({r.seed for r in self.rows})
        lines = [f"{'variant':<16}" + "".join(f"  seed{s:<3} MAE    MSE  " for s in seeds) + "   mean MAE   mean MSE"]
        for v in variants:
            rows = {r.seed: r.report for r in self.rows if r.variant == v}
            cells = "".join(f"  {rows[s].mae:8.3f} {rows[s].mse:8.3f}" if s in rows else " " * 20 for s in seeds)
            maes = [r.mae for r in rows.values()]
            mses = [r.mse for r in rows.values()]
            lines.append(f"{v:<16}{cells}   {np.mean(maes):8.3f}   {np.mean(mses):8.3f}")
        return "\n".join(lines) + "\n"


def run_ablation(corpus: Corpus, seeds, variants=VARIANTS, amg_config: TrainConfig | None = None,
                 dme_config: TrainConfig | None = None, threshold: float = 0.1,
                 amg_nets: dict[int, AmgNetwork] | None = None, log=None) -> AblationResult:
    """Train one AMG and one DME per variant for each seed; score on the test split."""
    amg_config = amg_config or TrainConfig(learning_rate=1e-5, epochs=20)
    dme_config = dme_config or TrainConfig(learning_rate=1e-4, epochs=30)
    result = AblationResult()
    for seed in seeds:
        amg = None
        if any(v != DME for v in variants):
            amg = (amg_nets or {}).get(seed)
            if amg is None:
                amg_cfg = TrainConfig(amg_config.learning_rate, amg_config.batch_size, amg_config.epochs, seed)
                amg, _ = train_amg(build_amg(seed), corpus.positives, corpus.negatives, amg_cfg, log=log)
        for kind in variants:
            variant = PipelineVariant(kind, threshold)
            cfg = TrainConfig(dme_config.learning_rate, dme_config.batch_size, dme_config.epochs, seed)
            net, hist = train_dme(build_dme(seed), corpus.positives, variant, amg if variant.uses_amg else None,
                                  cfg, log=log)
            report = evaluate_dme(net, corpus.test, variant, amg)
            result.rows.append(AblationRow(kind, seed, report, hist[-1]))
            if log:
                log(f"seed {seed} {kind}: mae={report.mae:.3f} mse={report.mse:.3f}")
    return result


def threshold_sweep(net: DmeNetwork, amg: AmgNetwork, samples: list[SceneSample],
                    thresholds=DEFAULT_THRESHOLDS) -> list[tuple[float, MetricsReport]]:
    """Evaluate one binary-attention checkpoint at several thresholds."""
    return [(t, evaluate_dme(net, samples, PipelineVariant(AMG_BATTN_DME, t), amg)) for t in thresholds]


def sweep_text(rows: list[tuple[float, MetricsReport]]) -> str:
    return "".join(f"t={t:g} mae={r.mae:.10g} mse={r.mse:.10g} psnr={r.mean_psnr:.10g} ssim={r.mean_ssim:.10g}\n"
                   for t, r in rows)


def patch_cache(corpus: Corpus, variant: PipelineVariant, amg: AmgNetwork | None):
    """Pre-built patch set, reusable across seeds that share an attention network."""
    return build_patch_set(corpus.positives, variant, amg)
