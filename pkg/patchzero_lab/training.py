"""
Training loops: the clean classifier, the adversarially trained baseline and the two
detector stages. Stage 1 trains the detector on attacks computed through the classifier
only; stage 2 regenerates attacks through the whole defense against the current detector
weights at every step. The classifier is never updated by detector training.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np

from .attacks import AttackTarget, MaskedExample, run_attack
from .data import Dataset, DatasetSplits, PatchSpec, sample_patch_spec
from .defense import binarize, pipeline_forward
from .errors import PatchZeroError, ShapeError
from .metrics import segmentation_metrics, top1_accuracy
from .models import AttackConfig, AttackFamily, DefenseConfig, GradMode, TrainConfig, TrainLogRecord
from .nn import (
    AdamState,
    Classifier,
    ClassifierParams,
    Detector,
    DetectorParams,
    cross_entropy,
    classifier_forward,
    detector_forward,
    init_params,
    loss_and_step,
    params_digest,
    pixel_bce,
)
from .tensor import Tensor
from .utils import timed

logger = logging.getLogger(__name__)

Stage = Literal["classifier", "adversarial", "stage1", "stage2"]


@dataclass(frozen=True)
class BatchRecord:
    stage: Stage
    epoch: int
    step: int
    attacked: int
    batch_size: int
    param_version_used: Optional[int]
    param_version_current: int


BatchHook = Callable[[BatchRecord], None]


@dataclass(eq=False)
class TrainLog:
    records: List[TrainLogRecord] = field(default_factory=list)
    path: Optional[Path] = None

    def append(self, record: TrainLogRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError(f"epoch {record.epoch} does not follow epoch {self.records[-1].epoch}")
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(record.model_dump_json() + "\n")

    def stage(self, stage: Stage) -> List[TrainLogRecord]:
        return [r for r in self.records if r.stage == stage]

    @property
    def last_epoch(self) -> int:
        return self.records[-1].epoch if self.records else 0

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text("".join(r.model_dump_json() + "\n" for r in self.records), encoding="utf-8")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "TrainLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(records=[TrainLogRecord.model_validate_json(line) for line in lines if line.strip()])


def _check_nonempty(splits: DatasetSplits) -> None:
    if len(splits.train) == 0 or len(splits.val) == 0:
        raise ShapeError("training needs non-empty train and val splits")


def batch_order(rng: np.random.Generator, n: int, batch_size: int) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def attacked_count(batch_len: int, mix_ratio: float) -> int:
    return int(round(mix_ratio * batch_len))


def sample_specs(rng: np.random.Generator, count: int, height: int, width: int, cfg: TrainConfig) -> List[PatchSpec]:
    lo, hi = cfg.patch_fraction_range
    specs = []
    for _ in range(count):
        fraction = float(rng.uniform(lo, hi))
        shape = cfg.patch_shapes[int(rng.integers(len(cfg.patch_shapes)))]
        specs.append(sample_patch_spec(rng, height, width, fraction, shape))
    return specs


def _training_attack(cfg: TrainConfig, grad_mode: GradMode) -> AttackConfig:
    return cfg.attack.model_copy(update={"grad_mode": grad_mode})


def _classifier_loop(
    splits: DatasetSplits,
    cfg: TrainConfig,
    stage: Stage,
    mix_ratio: float,
    on_batch: Optional[BatchHook],
    log_path: Optional[Path],
) -> Tuple[ClassifierParams, TrainLog]:
    _check_nonempty(splits)
    train, val = splits.train, splits.val
    params = init_params(
        "classifier", cfg.seed, in_channels=train.channels, image_size=train.image_size[0], num_classes=train.num_classes
    )
    state = AdamState.for_params(params)
    shuffle_rng = np.random.default_rng([cfg.seed, 10])
    patch_rng = np.random.default_rng([cfg.seed, 11])
    attack_cfg = _training_attack(cfg, GradMode.DO).model_copy(update={"family": AttackFamily.MPGD})
    height, width = train.image_size
    log = TrainLog(path=log_path)
    best_params, best_acc = params.copy(), -1.0
    attacked_so_far = 0

    for epoch in range(1, cfg.classifier_epochs + 1):
        start = time.perf_counter()
        timings: Dict[str, float] = {}
        losses = []
        for step, idx in enumerate(batch_order(shuffle_rng, len(train), cfg.batch_size)):
            x = train.images[idx].copy()
            y = train.labels[idx]
            k = attacked_count(len(idx), mix_ratio)
            if k:
                specs = sample_specs(patch_rng, k, height, width, cfg)
                target = AttackTarget.from_params(params)
                ids = np.arange(attacked_so_far, attacked_so_far + k)
                with timed(timings, "attack"):
                    x[:k] = run_attack(target, x[:k], y[:k], specs, attack_cfg, example_ids=ids).adversarial
                attacked_so_far += k
            if on_batch is not None:
                on_batch(BatchRecord(stage, epoch, step, k, len(idx), params.version, params.version))
            losses.append(loss_and_step(params, state, cfg.classifier_lr, lambda: cross_entropy(classifier_forward(params, Tensor(x)), y)))

        val_acc = top1_accuracy(Classifier(params).predict(val.images), val.labels)
        if val_acc > best_acc:
            best_params, best_acc = params.copy(), val_acc
        record = TrainLogRecord(
            epoch=epoch,
            stage=stage,
            loss=float(np.mean(losses)),
            first_batch_loss=losses[0],
            last_batch_loss=losses[-1],
            val_accuracy=val_acc,
            attack_seconds=timings.get("attack", 0.0),
            wall_seconds=time.perf_counter() - start,
        )
        log.append(record)
        logger.info("[%s] epoch %d loss %.4f val acc %.4f", stage, epoch, record.loss, val_acc)

    logger.info("[%s] best val acc %.4f (digest %s)", stage, best_acc, params_digest(best_params)[:12])
    return best_params, log


def train_classifier(
    splits: DatasetSplits,
    cfg: TrainConfig,
    on_batch: Optional[BatchHook] = None,
    log_path: Optional[Path] = None,
) -> Tuple[ClassifierParams, TrainLog]:
    """Adam on cross-entropy over seeded shuffles; returns the best-val-accuracy weights."""
    return _classifier_loop(splits, cfg, "classifier", 0.0, on_batch, log_path)


def adversarial_train_classifier(
    splits: DatasetSplits,
    cfg: TrainConfig,
    on_batch: Optional[BatchHook] = None,
    log_path: Optional[Path] = None,
) -> Tuple[ClassifierParams, TrainLog]:
    """As `train_classifier`, with mix_ratio of each batch replaced by fresh MPGD patches."""
    return _classifier_loop(splits, cfg, "adversarial", cfg.mix_ratio, on_batch, log_path)


def stage_switch_criterion(log: TrainLog, cfg: TrainConfig) -> bool:
    """True once stage-1 val F1 held >= threshold for `patience` epochs, or at the fixed epoch."""
    stage1 = log.stage("stage1")
    if not stage1:
        return False
    trigger = cfg.stage2_trigger
    if trigger.fixed_epoch is not None:
        return stage1[-1].epoch >= trigger.fixed_epoch
    recent = [r.val_f1 for r in stage1[-trigger.patience :]]
    return len(recent) == trigger.patience and all(f is not None and f >= trigger.f1_threshold for f in recent)


class DetectorTrainer:
    """Holds detector weights, optimizer state and random streams across both stages."""

    def __init__(
        self,
        classifier: ClassifierParams,
        splits: DatasetSplits,
        cfg: TrainConfig,
        defense: DefenseConfig,
        detector: Optional[DetectorParams] = None,
        on_batch: Optional[BatchHook] = None,
        log: Optional[TrainLog] = None,
    ) -> None:
        _check_nonempty(splits)
        self.classifier = classifier
        self.splits = splits
        self.cfg = cfg
        self.defense = defense
        self.mean = splits.train.mean
        train = splits.train
        self.detector = detector if detector is not None else init_params("detector", cfg.seed, in_channels=train.channels)
        self.state = AdamState.for_params(self.detector)
        self.on_batch = on_batch
        self.log = log if log is not None else TrainLog()
        self.shuffle_rng = np.random.default_rng([cfg.seed, 20])
        self.patch_rng = np.random.default_rng([cfg.seed, 21])
        self.classifier_digest = params_digest(classifier)
        self.attacked_so_far = 0
        self._val_specs: Optional[List[PatchSpec]] = None
        self._val_do: Optional[MaskedExample] = None

    def _target(self, grad_mode: GradMode) -> AttackTarget:
        detector = self.detector if grad_mode == GradMode.BPDA else None
        return AttackTarget.from_params(self.classifier, detector, self.defense, self.mean)

    def _val_subset(self) -> Dataset:
        val = self.splits.val
        return val.subset(np.arange(min(self.cfg.val_subset, len(val))))

    def validation_attack(self, grad_mode: GradMode) -> MaskedExample:
        val = self._val_subset()
        if self._val_specs is None:
            rng = np.random.default_rng([self.cfg.seed, 22])
            self._val_specs = sample_specs(rng, len(val), *val.image_size, self.cfg)
        if grad_mode == GradMode.DO and self._val_do is not None:
            return self._val_do
        ids = np.arange(len(val)) + 10_000_000
        result = run_attack(self._target(grad_mode), val.images, val.labels, self._val_specs, _training_attack(self.cfg, grad_mode), ids)
        if grad_mode == GradMode.DO:
            # DO attacks never see the detector, so one set serves every epoch.
            self._val_do = result
        return result

    def validate(self, grad_mode: GradMode) -> Tuple[float, float, float]:
        """(defended accuracy, segmentation F1, recall) on the attacked val subset."""
        attacked = self.validation_attack(grad_mode)
        out = pipeline_forward(Detector(self.detector), Classifier(self.classifier), attacked.adversarial, self.defense, self.mean)
        scores = segmentation_metrics(binarize(out.prob, self.defense.eps_p), attacked.gt_mask)
        return top1_accuracy(out.prediction, attacked.labels), scores.f1, scores.recall

    def run_epoch(self, stage: Literal["stage1", "stage2"]) -> TrainLogRecord:
        cfg = self.cfg
        grad_mode = GradMode.DO if stage == "stage1" else GradMode.BPDA
        attack_cfg = _training_attack(cfg, grad_mode)
        train = self.splits.train
        height, width = train.image_size
        epoch = self.log.last_epoch + 1
        start = time.perf_counter()
        timings: Dict[str, float] = {}
        losses = []

        for step, idx in enumerate(batch_order(self.shuffle_rng, len(train), cfg.batch_size)):
            x = train.images[idx].copy()
            y = train.labels[idx]
            masks = np.ones((len(idx), height, width), dtype=np.uint8)
            k = attacked_count(len(idx), cfg.mix_ratio)
            version_used = None
            if k:
                specs = sample_specs(self.patch_rng, k, height, width, cfg)
                target = self._target(grad_mode)
                version_used = self.detector.version
                ids = np.arange(self.attacked_so_far, self.attacked_so_far + k)
                with timed(timings, "attack"):
                    attacked = run_attack(target, x[:k], y[:k], specs, attack_cfg, example_ids=ids)
                x[:k] = attacked.adversarial
                masks[:k] = attacked.gt_mask
                self.attacked_so_far += k
            if self.on_batch is not None:
                self.on_batch(BatchRecord(stage, epoch, step, k, len(idx), version_used, self.detector.version))

            def loss_fn() -> Tensor:
                p, aux = detector_forward(self.detector, Tensor(x))
                return pixel_bce(p, masks, aux, cfg.aux_weight)

            losses.append(loss_and_step(self.detector, self.state, cfg.lr, loss_fn))

        if params_digest(self.classifier) != self.classifier_digest:
            raise PatchZeroError("classifier weights changed during detector training")
        with timed(timings, "validation"):
            val_acc, val_f1, val_recall = self.validate(grad_mode)
        record = TrainLogRecord(
            epoch=epoch,
            stage=stage,
            loss=float(np.mean(losses)),
            first_batch_loss=losses[0],
            last_batch_loss=losses[-1],
            val_accuracy=val_acc,
            val_f1=val_f1,
            val_recall=val_recall,
            attack_seconds=timings.get("attack", 0.0),
            wall_seconds=time.perf_counter() - start,
        )
        self.log.append(record)
        logger.info("[%s] epoch %d loss %.4f val F1 %.4f recall %.4f defended acc %.4f", stage, epoch, record.loss, val_f1, val_recall, val_acc)
        return record


def stage1_train_detector(
    classifier: ClassifierParams,
    splits: DatasetSplits,
    cfg: TrainConfig,
    defense: DefenseConfig,
    on_batch: Optional[BatchHook] = None,
    log_path: Optional[Path] = None,
) -> Tuple[DetectorParams, TrainLog]:
    """All stage-1 epochs on DO attacks (no early switch)."""
    trainer = DetectorTrainer(classifier, splits, cfg, defense, on_batch=on_batch, log=TrainLog(path=log_path))
    for _ in range(cfg.stage1_epochs):
        trainer.run_epoch("stage1")
    return trainer.detector, trainer.log


def stage2_train_detector(
    classifier: ClassifierParams,
    detector_init: DetectorParams,
    splits: DatasetSplits,
    cfg: TrainConfig,
    defense: DefenseConfig,
    on_batch: Optional[BatchHook] = None,
    log_path: Optional[Path] = None,
) -> Tuple[DetectorParams, TrainLog]:
    """Online BPDA attacks against the current detector weights; starts from a copy of `detector_init`."""
    trainer = DetectorTrainer(classifier, splits, cfg, defense, detector=detector_init.copy(), on_batch=on_batch, log=TrainLog(path=log_path))
    for _ in range(cfg.stage2_epochs):
        trainer.run_epoch("stage2")
    return trainer.detector, trainer.log
