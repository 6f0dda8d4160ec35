"""
Evaluation harness: benign and robust accuracy across attack families, gradient modes
and patch sizes, the ground-truth-mask bound, segmentation quality, benign false
positives, cross-attack and cross-shape transfer, and the report files.
"""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .attacks import AttackTarget, MaskedExample, run_attack
from .data import Dataset, DatasetSplits, sample_patch_spec
from .defense import binarize, defend_with_mask, pipeline_forward
from .errors import PatchZeroError
from .metrics import segmentation_metrics, top1_accuracy, zero_fraction
from .models import (
    AttackConfig,
    AttackFamily,
    DefenseConfig,
    GradMode,
    MetricsReport,
    PatchShape,
    RobustCell,
    RunConfig,
    SegmentationScores,
    ShapeTransferRow,
    TransferMatrix,
)
from .nn import Classifier, ClassifierParams, Detector, DetectorParams, params_digest
from .utils import timed
from .workflow import train_detector

logger = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray], np.ndarray]
CSV_FIELDS = ["metric", "attack", "grad_mode", "patch_fraction", "value"]
EVAL_BATCH = 128


def classifier_predictor(classifier: ClassifierParams) -> Predictor:
    return Classifier(classifier.frozen()).predict


def pipeline_predictor(detector: DetectorParams, classifier: ClassifierParams, defense: DefenseConfig, mean: np.ndarray) -> Predictor:
    det, cls = Detector(detector.frozen()), Classifier(classifier.frozen())

    def predict(images: np.ndarray) -> np.ndarray:
        chunks = [
            pipeline_forward(det, cls, images[i : i + EVAL_BATCH], defense, mean).prediction
            for i in range(0, len(images), EVAL_BATCH)
        ]
        return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)

    return predict


def attack_dataset(
    target: AttackTarget,
    dataset: Dataset,
    cfg: AttackConfig,
    patch_fraction: float,
    shape: PatchShape = "square",
    seed: int = 0,
) -> MaskedExample:
    """Attack every example under its own seeded PatchSpec (placement marginalized per example)."""
    height, width = dataset.image_size
    specs = [
        sample_patch_spec(np.random.default_rng([seed, i]), height, width, patch_fraction, shape) for i in range(len(dataset))
    ]
    return run_attack(target, dataset.images, dataset.labels, specs, cfg, example_ids=np.arange(len(dataset)))


def accuracy(
    predict: Predictor,
    dataset: Dataset,
    attack_cfg: Optional[AttackConfig] = None,
    target: Optional[AttackTarget] = None,
    patch_fraction: float = 0.09,
    shape: PatchShape = "square",
    seed: int = 0,
) -> float:
    """Top-1 accuracy on clean inputs, or on inputs attacked through `target` when attack_cfg is given."""
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset")
    if attack_cfg is None:
        return top1_accuracy(predict(dataset.images), dataset.labels)
    if target is None:
        raise ValueError("an attacked accuracy needs an attack target")
    attacked = attack_dataset(target, dataset, attack_cfg, patch_fraction, shape, seed)
    return top1_accuracy(predict(attacked.adversarial), attacked.labels)


def gt_mask_bound(classifier: Callable, attacked: MaskedExample, defense: DefenseConfig, mean: np.ndarray) -> float:
    predictions = defend_with_mask(classifier, attacked.adversarial, attacked.gt_mask, defense, mean)
    return top1_accuracy(predictions, attacked.labels)


def predicted_masks(detector: DetectorParams, images: np.ndarray, eps_p: float) -> np.ndarray:
    return binarize(Detector(detector.frozen()).predict(images, EVAL_BATCH), eps_p)


def benign_fpr(detector: DetectorParams, benign: Dataset, eps_p: float) -> float:
    if len(benign) == 0:
        raise ValueError("benign FPR of an empty dataset")
    return zero_fraction(predicted_masks(detector, benign.images, eps_p))


def detector_segmentation(detector: DetectorParams, attacked: MaskedExample, eps_p: float) -> SegmentationScores:
    return segmentation_metrics(predicted_masks(detector, attacked.adversarial, eps_p), attacked.gt_mask)


def _eval_subset(dataset: Dataset, max_examples: Optional[int]) -> Dataset:
    if max_examples is None or max_examples >= len(dataset):
        return dataset
    return dataset.subset(np.arange(max_examples))


def _family_cfg(cfg: RunConfig, family: AttackFamily, grad_mode: GradMode) -> AttackConfig:
    return cfg.attack.model_copy(update={"family": family, "grad_mode": grad_mode})


def ordering_violations(report: MetricsReport, tolerance: float) -> List[str]:
    """Check benign >= GT mask >= defended(DO) >= defended(BPDA) >= undefended per (attack, fraction)."""
    violations = []
    cells: Dict[tuple, Dict[GradMode, RobustCell]] = {}
    for cell in report.robust:
        cells.setdefault((cell.attack, cell.patch_fraction), {})[cell.grad_mode] = cell
    for (family, fraction), by_mode in cells.items():
        do, bpda = by_mode.get(GradMode.DO), by_mode.get(GradMode.BPDA)
        if do is None:
            continue
        where = f"{family.value}@{fraction:g}"
        chain = [("benign", report.benign_acc, 0.0), ("gt_mask", do.gt_mask_acc, tolerance), ("defended_DO", do.defended_acc, 0.0)]
        if bpda is not None:
            chain.append(("defended_BPDA", bpda.defended_acc, 0.0))
        chain.append(("undefended", do.undefended_acc, 0.0))
        for (upper_name, upper, _), (lower_name, lower, slack) in zip(chain, chain[1:]):
            if upper is None or lower is None:
                continue
            if upper + slack < lower:
                violations.append(f"{where}: {upper_name} {upper:.4f} < {lower_name} {lower:.4f}")
    for message in violations:
        logger.warning("Ordering violation %s", message)
    return violations


def evaluate(
    classifier: ClassifierParams,
    detector: DetectorParams,
    dataset: Dataset,
    cfg: RunConfig,
    mean: Optional[np.ndarray] = None,
    adv_classifier: Optional[ClassifierParams] = None,
) -> MetricsReport:
    mean = dataset.mean if mean is None else mean
    defense = cfg.defense
    test = _eval_subset(dataset, cfg.eval.max_examples)
    digests = (params_digest(classifier), params_digest(detector))
    wall: Dict[str, float] = {}

    undefended = classifier_predictor(classifier)
    defended = pipeline_predictor(detector, classifier, defense, mean)
    adv_predict = classifier_predictor(adv_classifier) if adv_classifier is not None else None
    with timed(wall, "benign"):
        benign_acc = top1_accuracy(undefended(test.images), test.labels)
        defended_benign = top1_accuracy(defended(test.images), test.labels)
        adv_benign = top1_accuracy(adv_predict(test.images), test.labels) if adv_predict else None
        fpr = benign_fpr(detector, test, defense.eps_p)
    logger.info("Benign acc %.4f, defended %.4f, pixel FPR %.2e", benign_acc, defended_benign, fpr)

    cells: List[RobustCell] = []
    for fraction in cfg.eval.patch_fractions:
        for family in cfg.eval.families:
            for grad_mode in cfg.eval.grad_modes:
                key = f"{family.value}/{grad_mode.value}/{fraction:g}"
                start = time.perf_counter()
                detector_for_attack = detector if grad_mode == GradMode.BPDA else None
                target = AttackTarget.from_params(classifier, detector_for_attack, defense, mean)
                attacked = attack_dataset(target, test, _family_cfg(cfg, family, grad_mode), fraction, cfg.eval.patch_shape, cfg.eval.seed)
                cell = RobustCell(
                    attack=family,
                    grad_mode=grad_mode,
                    patch_fraction=fraction,
                    defended_acc=top1_accuracy(defended(attacked.adversarial), attacked.labels),
                    gt_mask_acc=gt_mask_bound(Classifier(classifier.frozen()), attacked, defense, mean),
                    segmentation=detector_segmentation(detector, attacked, defense.eps_p),
                )
                if grad_mode == GradMode.DO:
                    cell.undefended_acc = top1_accuracy(undefended(attacked.adversarial), attacked.labels)
                    if adv_classifier is not None:
                        adv_target = AttackTarget.from_params(adv_classifier)
                        adv_attacked = attack_dataset(adv_target, test, _family_cfg(cfg, family, grad_mode), fraction, cfg.eval.patch_shape, cfg.eval.seed)
                        cell.adv_trained_acc = top1_accuracy(adv_predict(adv_attacked.adversarial), adv_attacked.labels)
                wall[key] = time.perf_counter() - start
                logger.info(
                    "%s: undefended %s defended %.4f gt-mask %.4f F1 %.4f",
                    key,
                    "-" if cell.undefended_acc is None else f"{cell.undefended_acc:.4f}",
                    cell.defended_acc,
                    cell.gt_mask_acc,
                    cell.segmentation.f1,
                )
                cells.append(cell)

    report = MetricsReport(
        benign_acc=benign_acc,
        defended_benign_acc=defended_benign,
        adv_trained_benign_acc=adv_benign,
        benign_fpr=fpr,
        robust=cells,
        wall_times=wall,
    )
    report.ordering_violations = ordering_violations(report, cfg.eval.ordering_tolerance)
    if (params_digest(classifier), params_digest(detector)) != digests:
        raise PatchZeroError("evaluation modified model parameters")
    return report


def transfer_matrix(
    classifier: ClassifierParams,
    splits: DatasetSplits,
    families: Sequence[AttackFamily],
    cfg: RunConfig,
    detectors: Optional[Dict[AttackFamily, DetectorParams]] = None,
) -> TransferMatrix:
    """Row i: detector trained on families[i]; column j: defended accuracy under families[j] (DO)."""
    if len(families) < 2:
        raise ValueError("a transfer matrix needs at least two attack families")
    mean = splits.train.mean
    test = _eval_subset(splits.test, cfg.eval.max_examples)
    fraction = max(cfg.eval.patch_fractions)
    target = AttackTarget.from_params(classifier)
    attacked = {
        family: attack_dataset(target, test, _family_cfg(cfg, family, GradMode.DO), fraction, cfg.eval.patch_shape, cfg.eval.seed)
        for family in families
    }

    values: List[List[float]] = []
    for trained_on in families:
        detector = (detectors or {}).get(trained_on)
        if detector is None:
            train_cfg = cfg.train.model_copy(update={"attack": cfg.train.attack.model_copy(update={"family": trained_on})})
            detector = train_detector(classifier, splits, train_cfg, cfg.defense).detector
        predict = pipeline_predictor(detector, classifier, cfg.defense, mean)
        row = [top1_accuracy(predict(attacked[f].adversarial), attacked[f].labels) for f in families]
        logger.info("Transfer row %s: %s", trained_on.value, ", ".join(f"{v:.4f}" for v in row))
        values.append(row)

    gaps = [row[i] - max(v for j, v in enumerate(row) if j != i) for i, row in enumerate(values)]
    return TransferMatrix(families=list(families), values=values, diagonal_gaps=gaps)


def shape_transfer_eval(
    classifier: ClassifierParams,
    detector: DetectorParams,
    dataset: Dataset,
    shapes: Sequence[PatchShape],
    cfg: RunConfig,
    mean: Optional[np.ndarray] = None,
) -> List[ShapeTransferRow]:
    """Per-shape undefended/defended accuracy and segmentation F1 under DO MPGD attacks."""
    mean = dataset.mean if mean is None else mean
    test = _eval_subset(dataset, cfg.eval.max_examples)
    fraction = max(cfg.eval.patch_fractions)
    target = AttackTarget.from_params(classifier)
    undefended = classifier_predictor(classifier)
    defended = pipeline_predictor(detector, classifier, cfg.defense, mean)
    rows = []
    for shape in shapes:
        attacked = attack_dataset(target, test, _family_cfg(cfg, AttackFamily.MPGD, GradMode.DO), fraction, shape, cfg.eval.seed)
        row = ShapeTransferRow(
            shape=shape,
            undefended_acc=top1_accuracy(undefended(attacked.adversarial), attacked.labels),
            defended_acc=top1_accuracy(defended(attacked.adversarial), attacked.labels),
            f1=detector_segmentation(detector, attacked, cfg.defense.eps_p).f1,
        )
        logger.info("Shape %s: undefended %.4f defended %.4f F1 %.4f", shape, row.undefended_acc, row.defended_acc, row.f1)
        rows.append(row)
    return rows


def report_rows(report: MetricsReport) -> List[Dict[str, str]]:
    rows: List[Dict[str, str]] = []

    def add(metric: str, value: Optional[float], attack: str = "", grad_mode: str = "", fraction: Optional[float] = None) -> None:
        if value is None:
            return
        rows.append(
            {
                "metric": metric,
                "attack": attack,
                "grad_mode": grad_mode,
                "patch_fraction": "" if fraction is None else repr(fraction),
                "value": repr(float(value)),
            }
        )

    add("benign_acc", report.benign_acc)
    add("defended_benign_acc", report.defended_benign_acc)
    add("adv_trained_benign_acc", report.adv_trained_benign_acc)
    add("benign_fpr", report.benign_fpr)
    for cell in report.robust:
        where = (cell.attack.value, cell.grad_mode.value, cell.patch_fraction)
        add("undefended_acc", cell.undefended_acc, *where)
        add("defended_acc", cell.defended_acc, *where)
        add("gt_mask_acc", cell.gt_mask_acc, *where)
        add("adv_trained_acc", cell.adv_trained_acc, *where)
        if cell.segmentation is not None:
            add("seg_precision", cell.segmentation.precision, *where)
            add("seg_recall", cell.segmentation.recall, *where)
            add("seg_accuracy", cell.segmentation.accuracy, *where)
            add("seg_f1", cell.segmentation.f1, *where)
    if report.transfer_matrix is not None:
        families = report.transfer_matrix.families
        for trained_on, row in zip(families, report.transfer_matrix.values):
            for tested_on, value in zip(families, row):
                add("transfer_defended_acc", value, f"{trained_on.value}->{tested_on.value}", GradMode.DO.value)
    for shape_row in report.shape_transfer:
        add("shape_undefended_acc", shape_row.undefended_acc, shape_row.shape)
        add("shape_defended_acc", shape_row.defended_acc, shape_row.shape)
        add("shape_seg_f1", shape_row.f1, shape_row.shape)
    return rows


def emit_report(report: MetricsReport, directory: str | Path) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / "report.json"
    csv_path = directory / "tables.csv"
    json_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(report_rows(report))
    logger.info("Wrote %s and %s", json_path, csv_path)
    return [json_path, csv_path]


def load_report(directory: str | Path) -> MetricsReport:
    return MetricsReport.model_validate_json((Path(directory) / "report.json").read_text(encoding="utf-8"))
