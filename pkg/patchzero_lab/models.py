from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import (
    DEFAULT_CLASSES,
    DEFAULT_CLASSIFIER_LR,
    DEFAULT_DILATION_RADIUS,
    DEFAULT_EPS_P,
    DEFAULT_IMAGE_SIZE,
    DEFAULT_LR,
    DEFAULT_SURROGATE_K,
)

PatchShape = Literal["rectangle", "square", "diamond", "octagon"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class AttackFamily(str, Enum):
    MPGD = "MPGD"
    MAPGD = "MAPGD"
    MCW = "MCW"


class GradMode(str, Enum):
    DO = "DO"
    BPDA = "BPDA"


class AttackConfig(StrictModel):
    family: AttackFamily = AttackFamily.MPGD
    eps: float = Field(1.0, gt=0.0, le=1.0)
    alpha: float = Field(0.01, gt=0.0)
    iters: int = Field(100, ge=1)
    restarts: int = Field(3, ge=1)
    grad_mode: GradMode = GradMode.DO
    seed: int = 0
    # AutoPGD schedule; momentum is the weight kept on the previous direction.
    rho: float = Field(0.75, gt=0.0, le=1.0)
    momentum: float = Field(0.25, ge=0.0, lt=1.0)
    step_halving: bool = True
    # Carlini-Wagner confidence margin.
    kappa: float = Field(0.0, ge=0.0)

    @field_validator("family", "grad_mode", mode="before")
    @classmethod
    def _upper(cls, value: object) -> object:
        return value.upper() if isinstance(value, str) else value


class DefenseConfig(StrictModel):
    eps_p: float = Field(DEFAULT_EPS_P, gt=0.0, lt=1.0)
    k: float = Field(DEFAULT_SURROGATE_K, gt=0.0)
    dilation_radius: int = Field(DEFAULT_DILATION_RADIUS, ge=0)
    # Per-channel dataset mean; filled from the train split when left empty.
    mean_pixel: Optional[List[float]] = None
    soften_dilation: bool = False


class Stage2Trigger(StrictModel):
    fixed_epoch: Optional[int] = Field(None, ge=1)
    f1_threshold: float = Field(0.95, gt=0.0, le=1.0)
    patience: int = Field(2, ge=1)


def _training_attack() -> "AttackConfig":
    return AttackConfig(iters=20, restarts=1)


class TrainConfig(StrictModel):
    lr: float = Field(DEFAULT_LR, gt=0.0)
    # `lr` drives detector training; classifier training (clean and adversarial) uses `classifier_lr`
    classifier_lr: float = Field(DEFAULT_CLASSIFIER_LR, gt=0.0)
    batch_size: int = Field(32, ge=1)
    classifier_epochs: int = Field(20, ge=1)
    stage1_epochs: int = Field(6, ge=1)
    stage2_epochs: int = Field(4, ge=0)
    mix_ratio: float = Field(0.5, ge=0.0, le=1.0)
    stage2_trigger: Stage2Trigger = Field(default_factory=Stage2Trigger)
    attack: AttackConfig = Field(default_factory=_training_attack)
    patch_fraction_range: Tuple[float, float] = (0.02, 0.10)
    patch_shapes: List[PatchShape] = Field(default_factory=lambda: ["square"])
    aux_weight: float = Field(0.4, ge=0.0)
    val_subset: int = Field(64, ge=1)
    seed: int = 0

    @field_validator("patch_fraction_range")
    @classmethod
    def _ordered_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = value
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("patch_fraction_range must satisfy 0 < min <= max < 1")
        return value


class DataConfig(StrictModel):
    source: Literal["shapes", "idx", "cifar"] = "shapes"
    classes: List[str] = Field(default_factory=lambda: list(DEFAULT_CLASSES))
    image_size: int = Field(DEFAULT_IMAGE_SIZE, ge=4)
    n_train_per_class: int = Field(500, ge=1)
    n_val_per_class: int = Field(50, ge=1)
    n_test_per_class: int = Field(50, ge=1)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    val_fraction: float = Field(0.1, gt=0.0, lt=1.0)

    @field_validator("image_size")
    @classmethod
    def _divisible_by_four(cls, value: int) -> int:
        if value % 4:
            raise ValueError("image_size must be divisible by 4")
        return value

    @model_validator(mode="after")
    def _paths_for_files(self) -> "DataConfig":
        if self.source == "idx" and not (self.train_images and self.train_labels):
            raise ValueError("idx source needs train_images and train_labels")
        if self.source == "cifar" and not self.train_images:
            raise ValueError("cifar source needs train_images")
        return self


class EvalConfig(StrictModel):
    families: List[AttackFamily] = Field(default_factory=lambda: [AttackFamily.MPGD, AttackFamily.MAPGD, AttackFamily.MCW])
    grad_modes: List[GradMode] = Field(default_factory=lambda: [GradMode.DO, GradMode.BPDA])
    patch_fractions: List[float] = Field(default_factory=lambda: [0.02, 0.09])
    patch_shape: PatchShape = "square"
    max_examples: Optional[int] = Field(None, ge=1)
    transfer_families: List[AttackFamily] = Field(default_factory=lambda: [AttackFamily.MPGD, AttackFamily.MAPGD])
    transfer_shapes: List[PatchShape] = Field(default_factory=lambda: ["diamond", "octagon", "rectangle"])
    ordering_tolerance: float = Field(0.02, ge=0.0)
    seed: int = 1234

    @field_validator("patch_fractions")
    @classmethod
    def _fractions_in_range(cls, value: List[float]) -> List[float]:
        if any(not 0.0 < f < 1.0 for f in value):
            raise ValueError("patch fractions must lie in (0, 1)")
        return value


def _eval_attack() -> "AttackConfig":
    return AttackConfig(iters=100, restarts=3)


class RunConfig(StrictModel):
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    attack: AttackConfig = Field(default_factory=_eval_attack)
    defense: DefenseConfig = Field(default_factory=DefenseConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


class TrainLogRecord(StrictModel):
    epoch: int
    stage: Literal["classifier", "adversarial", "stage1", "stage2"]
    loss: float
    first_batch_loss: float
    last_batch_loss: float
    val_accuracy: Optional[float] = None
    val_f1: Optional[float] = None
    val_recall: Optional[float] = None
    attack_seconds: float = 0.0
    wall_seconds: float = 0.0


class SegmentationScores(StrictModel):
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    accuracy: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    # False when no pixel was predicted adversarial; precision is then 1.0 only if no patch pixel was missed.
    precision_defined: bool = True


class RobustCell(StrictModel):
    attack: AttackFamily
    grad_mode: GradMode
    patch_fraction: float
    undefended_acc: Optional[float] = Field(None, ge=0.0, le=1.0)
    defended_acc: float = Field(ge=0.0, le=1.0)
    gt_mask_acc: Optional[float] = Field(None, ge=0.0, le=1.0)
    adv_trained_acc: Optional[float] = Field(None, ge=0.0, le=1.0)
    segmentation: Optional[SegmentationScores] = None


class TransferMatrix(StrictModel):
    families: List[AttackFamily]
    # values[i][j]: detector trained on families[i], evaluated under families[j]
    values: List[List[float]]
    diagonal_gaps: List[float]

    @model_validator(mode="after")
    def _square(self) -> "TransferMatrix":
        n = len(self.families)
        if len(self.values) != n or any(len(row) != n for row in self.values):
            raise ValueError("transfer matrix must be square over the attack families")
        return self


class ShapeTransferRow(StrictModel):
    shape: PatchShape
    undefended_acc: float = Field(ge=0.0, le=1.0)
    defended_acc: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)


class MetricsReport(StrictModel):
    benign_acc: float = Field(ge=0.0, le=1.0)
    defended_benign_acc: Optional[float] = Field(None, ge=0.0, le=1.0)
    adv_trained_benign_acc: Optional[float] = Field(None, ge=0.0, le=1.0)
    benign_fpr: Optional[float] = Field(None, ge=0.0, le=1.0)
    robust: List[RobustCell] = Field(default_factory=list)
    transfer_matrix: Optional[TransferMatrix] = None
    shape_transfer: List[ShapeTransferRow] = Field(default_factory=list)
    ordering_violations: List[str] = Field(default_factory=list)
    wall_times: Dict[str, float] = Field(default_factory=dict)


class RunManifest(StrictModel):
    command: str
    version: str
    seed: int
    config: RunConfig
    artifacts: Dict[str, str] = Field(default_factory=dict)
    digests: Dict[str, str] = Field(default_factory=dict)
    wall_times: Dict[str, float] = Field(default_factory=dict)
    notes: Dict[str, str] = Field(default_factory=dict)
