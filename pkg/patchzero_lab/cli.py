"""
Command-line entry point. Every subcommand writes into its own `<out>/<subcommand>/`
directory together with a manifest.json; an existing subcommand directory is never
overwritten. Concurrent invocations must use distinct --out directories.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from .attacks import AttackTarget
from .checkpoint import load_checkpoint, save_checkpoint
from .config import LOG_LEVEL
from .data import DatasetSplits, build_splits, dataset_digest, load_npz, save_npz
from .errors import ArtifactExistsError, ConfigSchemaError, ConfigSyntaxError, MissingArtifactError, PatchZeroError
from .evaluation import (
    attack_dataset,
    classifier_predictor,
    emit_report,
    evaluate,
    pipeline_predictor,
    shape_transfer_eval,
    transfer_matrix,
)
from .metrics import top1_accuracy
from .models import AttackFamily, GradMode, MetricsReport, RunConfig, RunManifest
from .nn import ModelParams, params_digest
from .training import adversarial_train_classifier, train_classifier
from .utils import setup_logging, version_string
from .workflow import train_detector

logger = logging.getLogger(__name__)

GEN_DATA = "gen-data"
TRAIN_CLASSIFIER = "train-classifier"
TRAIN_CLASSIFIER_ADV = "train-classifier-adv"
TRAIN_DETECTOR = "train-detector"
ATTACK = "attack"
EVAL = "eval"
TRANSFER = "transfer"
SHAPE_TRANSFER = "shape-transfer"


def parse_config(path: str | Path) -> RunConfig:
    """Parse a JSON run config; unknown keys and out-of-range values name their key path."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(exc.msg, exc.lineno, exc.colno) from exc
    return config_from_dict(raw)


def config_from_dict(raw: object) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigSchemaError("<root>", "expected a JSON object")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        key_path = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigSchemaError(key_path, first["msg"]) from exc


def canonical_config_json(cfg: RunConfig) -> str:
    return cfg.model_dump_json(indent=2) + "\n"


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    data = cfg.model_dump()
    if args.seed is not None:
        data["seed"] = args.seed
        data["train"]["seed"] = args.seed
    if args.out is not None:
        data["out_dir"] = args.out
    if args.attack is not None:
        data["attack"]["family"] = args.attack
        data["eval"]["families"] = [args.attack]
    if args.grad_mode is not None:
        data["attack"]["grad_mode"] = args.grad_mode
        data["eval"]["grad_modes"] = [args.grad_mode]
    if args.patch_fraction is not None:
        data["eval"]["patch_fractions"] = [args.patch_fraction]
    if args.patch_shape is not None:
        data["eval"]["patch_shape"] = args.patch_shape
    if args.max_examples is not None:
        data["eval"]["max_examples"] = args.max_examples
    return config_from_dict(data)


@dataclass(eq=False)
class RunContext:
    command: str
    cfg: RunConfig
    root: Path
    started: float = field(default_factory=time.perf_counter)
    artifacts: Dict[str, str] = field(default_factory=dict)
    digests: Dict[str, str] = field(default_factory=dict)
    wall_times: Dict[str, float] = field(default_factory=dict)
    notes: Dict[str, str] = field(default_factory=dict)

    @property
    def run_dir(self) -> Path:
        return self.root / self.command

    def input_path(self, command: str, name: str) -> Path:
        path = self.root / command / name
        if not path.exists():
            raise MissingArtifactError(f"{path} not found; run `{command}` first")
        return path

    def open_run_dir(self) -> Path:
        if self.run_dir.exists() and any(self.run_dir.iterdir()):
            raise ArtifactExistsError(f"{self.run_dir} already exists; run directories are append-only")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        return self.run_dir

    def record(self, name: str, path: Path, digest: Optional[str] = None) -> None:
        self.artifacts[name] = str(path.relative_to(self.run_dir))
        if digest is not None:
            self.digests[name] = digest

    def write_manifest(self) -> Path:
        self.wall_times["total"] = time.perf_counter() - self.started
        manifest = RunManifest(
            command=self.command,
            version=version_string(),
            seed=self.cfg.seed,
            config=self.cfg,
            artifacts=self.artifacts,
            digests=self.digests,
            wall_times=self.wall_times,
            notes=self.notes,
        )
        path = self.run_dir / "manifest.json"
        path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path


def _load_splits(ctx: RunContext) -> DatasetSplits:
    return DatasetSplits(
        train=load_npz(ctx.input_path(GEN_DATA, "train.npz")),
        val=load_npz(ctx.input_path(GEN_DATA, "val.npz")),
        test=load_npz(ctx.input_path(GEN_DATA, "test.npz")),
    )


def _mean(ctx: RunContext, splits: DatasetSplits) -> np.ndarray:
    if ctx.cfg.defense.mean_pixel is not None:
        return np.asarray(ctx.cfg.defense.mean_pixel, dtype=np.float32)
    return splits.train.mean


def _save_params(ctx: RunContext, name: str, params: ModelParams) -> None:
    path = ctx.run_dir / f"{name}.pzck"
    save_checkpoint(params, path)
    ctx.record(name, path, params_digest(params))


def cmd_gen_data(ctx: RunContext) -> None:
    splits = build_splits(ctx.cfg.data, ctx.cfg.seed)
    run_dir = ctx.open_run_dir()
    for name in ("train", "val", "test"):
        dataset = getattr(splits, name)
        path = run_dir / f"{name}.npz"
        save_npz(dataset, path)
        ctx.record(name, path, dataset_digest(dataset))
        logger.info("Wrote %d %s examples to %s", len(dataset), name, path)
    ctx.notes["mean_pixel"] = json.dumps([float(v) for v in splits.train.mean])


def _cmd_classifier(ctx: RunContext, adversarial: bool) -> None:
    splits = _load_splits(ctx)
    run_dir = ctx.open_run_dir()
    trainer = adversarial_train_classifier if adversarial else train_classifier
    params, log = trainer(splits, ctx.cfg.train, log_path=run_dir / "train_log.jsonl")
    ctx.record("train_log", run_dir / "train_log.jsonl")
    _save_params(ctx, "adv_classifier" if adversarial else "classifier", params)
    ctx.notes["best_val_accuracy"] = repr(max(r.val_accuracy or 0.0 for r in log.records))
    ctx.wall_times["train"] = sum(r.wall_seconds for r in log.records)


def cmd_train_classifier(ctx: RunContext) -> None:
    _cmd_classifier(ctx, adversarial=False)


def cmd_train_classifier_adv(ctx: RunContext) -> None:
    _cmd_classifier(ctx, adversarial=True)


def cmd_train_detector(ctx: RunContext) -> None:
    classifier = load_checkpoint(ctx.input_path(TRAIN_CLASSIFIER, "classifier.pzck"))
    splits = _load_splits(ctx)
    run_dir = ctx.open_run_dir()
    defense = ctx.cfg.defense.model_copy(update={"mean_pixel": [float(v) for v in _mean(ctx, splits)]})
    result = train_detector(classifier, splits, ctx.cfg.train, defense, log_path=run_dir / "train_log.jsonl")
    ctx.record("train_log", run_dir / "train_log.jsonl")
    _save_params(ctx, "detector_stage1", result.stage1_detector)
    _save_params(ctx, "detector", result.detector)
    ctx.notes["switch_epoch"] = str(result.switch_epoch)
    ctx.notes["switch_reason"] = result.switch_reason
    ctx.wall_times["train"] = sum(r.wall_seconds for r in result.log.records)


def cmd_attack(ctx: RunContext) -> None:
    cfg = ctx.cfg
    classifier = load_checkpoint(ctx.input_path(TRAIN_CLASSIFIER, "classifier.pzck"))
    detector = None
    if cfg.attack.grad_mode == GradMode.BPDA:
        detector = load_checkpoint(ctx.input_path(TRAIN_DETECTOR, "detector.pzck"))
    splits = _load_splits(ctx)
    run_dir = ctx.open_run_dir()
    mean = _mean(ctx, splits)
    test = splits.test if cfg.eval.max_examples is None else splits.test.subset(np.arange(min(cfg.eval.max_examples, len(splits.test))))
    target = AttackTarget.from_params(classifier, detector, cfg.defense, mean)
    fraction = cfg.eval.patch_fractions[0]
    start = time.perf_counter()
    attacked = attack_dataset(target, test, cfg.attack, fraction, cfg.eval.patch_shape, cfg.eval.seed)
    ctx.wall_times["attack"] = time.perf_counter() - start
    path = run_dir / "attacked.npz"
    np.savez(
        path,
        original=attacked.original,
        adversarial=attacked.adversarial,
        masks=attacked.gt_mask,
        labels=attacked.labels,
        objective=attacked.objective,
    )
    ctx.record("attacked", path)
    accuracy = top1_accuracy(classifier_predictor(classifier)(attacked.adversarial), attacked.labels)
    ctx.notes["undefended_accuracy"] = repr(accuracy)
    logger.info("%s/%s at %.2f: undefended accuracy %.4f", cfg.attack.family.value, cfg.attack.grad_mode.value, fraction, accuracy)


def cmd_eval(ctx: RunContext) -> None:
    classifier = load_checkpoint(ctx.input_path(TRAIN_CLASSIFIER, "classifier.pzck"))
    detector = load_checkpoint(ctx.input_path(TRAIN_DETECTOR, "detector.pzck"))
    adv_path = ctx.root / TRAIN_CLASSIFIER_ADV / "adv_classifier.pzck"
    adv_classifier = load_checkpoint(adv_path) if adv_path.exists() else None
    splits = _load_splits(ctx)
    run_dir = ctx.open_run_dir()
    report = evaluate(classifier, detector, splits.test, ctx.cfg, _mean(ctx, splits), adv_classifier)
    for path in emit_report(report, run_dir):
        ctx.record(path.stem, path)
    ctx.wall_times.update(report.wall_times)
    ctx.notes["eval_restarts"] = str(ctx.cfg.attack.restarts)
    ctx.notes["ordering_violations"] = str(len(report.ordering_violations))


def cmd_transfer(ctx: RunContext) -> None:
    classifier = load_checkpoint(ctx.input_path(TRAIN_CLASSIFIER, "classifier.pzck"))
    splits = _load_splits(ctx)
    run_dir = ctx.open_run_dir()
    matrix = transfer_matrix(classifier, splits, ctx.cfg.eval.transfer_families, ctx.cfg)
    benign = top1_accuracy(classifier_predictor(classifier)(splits.test.images), splits.test.labels)
    report = MetricsReport(benign_acc=benign, transfer_matrix=matrix)
    for path in emit_report(report, run_dir):
        ctx.record(path.stem, path)


def cmd_shape_transfer(ctx: RunContext) -> None:
    classifier = load_checkpoint(ctx.input_path(TRAIN_CLASSIFIER, "classifier.pzck"))
    detector = load_checkpoint(ctx.input_path(TRAIN_DETECTOR, "detector.pzck"))
    splits = _load_splits(ctx)
    run_dir = ctx.open_run_dir()
    mean = _mean(ctx, splits)
    shapes = ["square", *[s for s in ctx.cfg.eval.transfer_shapes if s != "square"]]
    rows = shape_transfer_eval(classifier, detector, splits.test, shapes, ctx.cfg, mean)
    test = splits.test
    report = MetricsReport(
        benign_acc=top1_accuracy(classifier_predictor(classifier)(test.images), test.labels),
        defended_benign_acc=top1_accuracy(pipeline_predictor(detector, classifier, ctx.cfg.defense, mean)(test.images), test.labels),
        shape_transfer=rows,
    )
    for path in emit_report(report, run_dir):
        ctx.record(path.stem, path)


COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    GEN_DATA: cmd_gen_data,
    TRAIN_CLASSIFIER: cmd_train_classifier,
    TRAIN_CLASSIFIER_ADV: cmd_train_classifier_adv,
    TRAIN_DETECTOR: cmd_train_detector,
    ATTACK: cmd_attack,
    EVAL: cmd_eval,
    TRANSFER: cmd_transfer,
    SHAPE_TRANSFER: cmd_shape_transfer,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="run root; each subcommand writes <out>/<subcommand>/")
    common.add_argument("--attack", type=str.upper, choices=[f.value for f in AttackFamily])
    common.add_argument("--grad-mode", type=str.upper, choices=[m.value for m in GradMode])
    common.add_argument("--patch-fraction", type=float)
    common.add_argument("--patch-shape", choices=["rectangle", "square", "diamond", "octagon"])
    common.add_argument("--max-examples", type=int, help="evaluate on the first N test examples")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default from PZ_LOG_LEVEL)")

    parser = argparse.ArgumentParser(prog="patchzero-lab", description="Patch-zeroing defense lab")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        subparsers.add_parser(name, parents=[common])
    return parser


def run_command(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging(args.log_level or LOG_LEVEL)

    try:
        cfg = parse_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(cfg, args)
        ctx = RunContext(command=args.command, cfg=cfg, root=Path(cfg.out_dir))
        COMMANDS[args.command](ctx)
        manifest = ctx.write_manifest()
        logger.info("%s finished; manifest at %s", args.command, manifest)
        return 0
    except PatchZeroError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except Exception:
        logger.exception("%s failed unexpectedly", args.command)
        return 1


def main(argv: Optional[List[str]] = None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)
