"""Command-line entry point: synth, train-amg, train-dme, eval, infer, gradcheck.

Configuration is a flat ``key=value`` text file (``#`` starts a comment),
overridden by ``--seed`` and ``--out``.  Every command writes the resolved
configuration to ``<out>/<command>.config.txt``.

Exit codes: 0 ok, 1 gradcheck failure, 2 I/O or format error, 3 missing
prerequisite artifact, 4 checkpoint/architecture mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .amg import AmgNetwork, amg_forward, build_amg, classify, train_amg
from .dme import VARIANTS, DmeNetwork, PipelineVariant, build_dme, dme_forward, predict_counts, train_dme
from .experiments import sweep_text
from .fileio import FormatError, load_split, read_pgm, write_corpus, write_dmap, write_pgm
from .metrics import evaluate, prepare_record, record_from_fullres
from .params import CheckpointError, CheckpointMismatch, TrainConfig, load_checkpoint, save_checkpoint
from .synthdata import BACKGROUND, CROWD, CorpusConfig
from .tensor import ShapeError

log = logging.getLogger("attncount")

EXIT_OK, EXIT_GRADCHECK, EXIT_IO, EXIT_MISSING, EXIT_MISMATCH = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    seed: int = 42
    out_dir: str = "run"
    corpus_dir: str = ""
    amg_ckpt: str = ""
    dme_ckpt: str = ""
    variant: str = "DME"
    threshold: float = 0.1
    amg_learning_rate: float = 1e-5
    amg_epochs: int = 20
    dme_learning_rate: float = 1e-4
    dme_epochs: int = 30
    batch_size: int = 8
    precision: int = 32
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

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def corpus_path(self) -> Path:
        return Path(self.corpus_dir) if self.corpus_dir else self.out / "corpus"

    @property
    def amg_path(self) -> Path:
        return Path(self.amg_ckpt) if self.amg_ckpt else self.out / "amg.ckpt"

    @property
    def dme_path(self) -> Path:
        return Path(self.dme_ckpt) if self.dme_ckpt else self.out / "dme.ckpt"

    def corpus(self) -> CorpusConfig:
        kw = {k: getattr(self, k) for k in CorpusConfig.keys() if k != "rng_seed"}
        return CorpusConfig(rng_seed=self.seed, **kw)

    def variant_spec(self) -> PipelineVariant:
        return PipelineVariant(self.variant, self.threshold)

    def amg_train(self) -> TrainConfig:
        return TrainConfig(self.amg_learning_rate, self.batch_size, self.amg_epochs, self.seed, self.precision)

    def dme_train(self) -> TrainConfig:
        return TrainConfig(self.dme_learning_rate, self.batch_size, self.dme_epochs, self.seed, self.precision)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {lineno}: expected key=value, got {raw!r}", EXIT_IO)
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def resolve_config(path: str | None, seed: int | None, out: str | None) -> RunConfig:
    values: dict[str, str] = {}
    if path:
        try:
            values = parse_config_text(Path(path).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
    types = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}", EXIT_IO)
    kwargs = {}
    for key, value in values.items():
        caster = {"int": int, "float": float}.get(types[key], str)
        try:
            kwargs[key] = caster(value)
        except ValueError as exc:
            raise CliError(f"config key {key}: cannot parse {value!r}", EXIT_IO) from exc
    if seed is not None:
        kwargs["seed"] = seed
    if out is not None:
        kwargs["out_dir"] = out
    cfg = RunConfig(**kwargs)
    if cfg.variant not in VARIANTS:
        raise CliError(f"variant must be one of {VARIANTS}", EXIT_IO)
    return cfg


def _prepare_out(cfg: RunConfig, command: str) -> None:
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / f"{command}.config.txt").write_text(cfg.to_text())
    except OSError as exc:
        raise CliError(f"cannot write to output directory {cfg.out}: {exc}", EXIT_IO) from exc


def _load_net(net, path: Path, what: str):
    if not path.exists():
        raise CliError(f"{what} checkpoint not found: {path}", EXIT_MISSING)
    try:
        load_checkpoint(net.params, path)
    except CheckpointMismatch as exc:
        raise CliError(f"{what} checkpoint does not match the architecture: {exc}", EXIT_MISMATCH) from exc
    except CheckpointError as exc:
        raise CliError(f"{what} checkpoint is malformed: {exc}", EXIT_MISMATCH) from exc
    return net


def _load_corpus(cfg: RunConfig, split: str):
    try:
        samples = load_split(cfg.corpus_path, split)
    except FileNotFoundError as exc:
        raise CliError(f"corpus not found under {cfg.corpus_path} (run synth first)", EXIT_MISSING) from exc
    except FormatError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    if not samples:
        raise CliError(f"corpus split {split!r} is empty", EXIT_MISSING)
    return samples


def _write_history(path: Path, history: list[float]) -> None:
    path.write_text("".join(f"{v:.10g}\n" for v in history))


def cmd_synth(cfg: RunConfig) -> int:
    try:
        entries = write_corpus(cfg.corpus(), cfg.corpus_path)
    except OSError as exc:
        raise CliError(f"cannot write corpus to {cfg.corpus_path}: {exc}", EXIT_IO) from exc
    print(f"wrote {len(entries)} samples to {cfg.corpus_path}")
    return EXIT_OK


def cmd_train_amg(cfg: RunConfig) -> int:
    train = _load_corpus(cfg, "train")
    pos = [s for s in train if s.label == CROWD]
    neg = [s for s in train if s.label == BACKGROUND]
    net, history = train_amg(build_amg(cfg.seed), pos, neg, cfg.amg_train(), log=log.info)
    save_checkpoint(net.params, cfg.out / "amg.ckpt")
    _write_history(cfg.out / "amg_loss.txt", history)
    print(f"amg trained: final loss {history[-1]:.6f}")
    return EXIT_OK


def _maybe_amg(cfg: RunConfig, variant: PipelineVariant) -> AmgNetwork | None:
    if not variant.uses_amg:
        return None
    return _load_net(build_amg(cfg.seed), cfg.amg_path, "AMG")


def cmd_train_dme(cfg: RunConfig) -> int:
    variant = cfg.variant_spec()
    amg = _maybe_amg(cfg, variant)
    train = [s for s in _load_corpus(cfg, "train") if s.label == CROWD]
    net, history = train_dme(build_dme(cfg.seed), train, variant, amg, cfg.dme_train(), log=log.info)
    save_checkpoint(net.params, cfg.out / "dme.ckpt")
    _write_history(cfg.out / "dme_loss.txt", history)
    print(f"dme[{variant.kind}] trained: final loss {history[-1]:.6f}")
    return EXIT_OK


def _evaluate_variant(net: DmeNetwork, amg, samples, variant: PipelineVariant, save_dir: Path | None):
    preds = predict_counts(net, samples, variant, amg)
    records = [prepare_record(p, s.gt_density) for p, s in zip(preds, samples)]
    if save_dir is not None:
        save_dir.mkdir(parents=True, exist_ok=True)
        for s, p in zip(samples, preds):
            (save_dir / f"{s.index:05d}_pred.dmap").write_bytes(write_dmap(p))
            if amg is not None:
                (save_dir / f"{s.index:05d}_attention.pgm").write_bytes(write_pgm(amg_forward(amg, s.image).attention))
    return evaluate(records)


def cmd_eval(cfg: RunConfig, oracle: bool = False, save_maps: bool = False,
             thresholds: list[float] | None = None) -> int:
    test = _load_corpus(cfg, "test")
    if oracle:
        report = evaluate([record_from_fullres(s.gt_density.array(), s.gt_density.array()) for s in test])
        (cfg.out / "report.txt").write_text(report.to_text())
        print(report.to_text(), end="")
        return EXIT_OK
    variant = cfg.variant_spec()
    amg = _maybe_amg(cfg, variant)
    net = _load_net(build_dme(cfg.seed), cfg.dme_path, "DME")
    save_dir = cfg.out / "maps" if save_maps else None
    if thresholds:
        rows = [(t, _evaluate_variant(net, amg, test, PipelineVariant(variant.kind, t), None)) for t in thresholds]
        text = sweep_text(rows)
        (cfg.out / "threshold_report.txt").write_text(text)
        print(text, end="")
        return EXIT_OK
    report = _evaluate_variant(net, amg, test, variant, save_dir)
    (cfg.out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, image_path: str) -> int:
    try:
        image = read_pgm(Path(image_path).read_bytes())
    except OSError as exc:
        raise CliError(f"cannot read image {image_path}: {exc}", EXIT_IO) from exc
    except FormatError as exc:
        raise CliError(f"malformed PGM {image_path}: {exc}", EXIT_IO) from exc
    _, _, h, w = image.shape
    if h % 4 or w % 4 or h < 16 or w < 16:
        raise CliError(f"image is {h}x{w}; both sides must be multiples of 4 and at least 16", EXIT_IO)
    variant = cfg.variant_spec()
    net = _load_net(build_dme(cfg.seed), cfg.dme_path, "DME")
    amg = None
    if variant.uses_amg or cfg.amg_path.exists():
        amg = _load_net(build_amg(cfg.seed), cfg.amg_path, "AMG")
    pred = dme_forward(net, image, variant, amg if variant.uses_amg else None)
    record = prepare_record(pred, _blank_like(image))
    stem = Path(image_path).stem
    (cfg.out / f"{stem}_pred.dmap").write_bytes(write_dmap(pred))
    line = f"count={record.predicted_count:.6f}"
    if amg is not None:
        label, conf = classify(amg, image)
        (cfg.out / f"{stem}_attention.pgm").write_bytes(write_pgm(amg_forward(amg, image).attention))
        line += f" label={label} confidence={conf:.6f}"
    print(line)
    return EXIT_OK


def _blank_like(image):
    from .synthdata import DensityMap
    from .tensor import Tensor

    return DensityMap(Tensor(np.zeros(image.shape, dtype=np.float32)), 1)


def cmd_gradcheck() -> int:
    results = gradcheck.run_suite(log=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_GRADCHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attncount", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "train-amg", "train-dme", "eval", "infer"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override the rng seed")
        p.add_argument("--out", help="output directory")
        if name == "eval":
            p.add_argument("--oracle", action="store_true", help="score ground truth against itself")
            p.add_argument("--save-maps", action="store_true", help="write predicted DMAPs and attention PGMs")
            p.add_argument("--thresholds", help="comma-separated binarization thresholds to sweep")
        if name == "infer":
            p.add_argument("image", help="input PGM")
    sub.add_parser("gradcheck")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck()
        cfg = resolve_config(args.config, args.seed, args.out)
        _prepare_out(cfg, args.command)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train-amg":
            return cmd_train_amg(cfg)
        if args.command == "train-dme":
            return cmd_train_dme(cfg)
        if args.command == "eval":
            thresholds = [float(t) for t in args.thresholds.split(",")] if args.thresholds else None
            return cmd_eval(cfg, oracle=args.oracle, save_maps=args.save_maps, thresholds=thresholds)
        return cmd_infer(cfg, args.image)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
