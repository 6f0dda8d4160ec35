from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np

from ..config import shard_size
from ..data import PatchSpec, rasterize_masks
from ..defense import ModelFn, pipeline_forward_bpda
from ..errors import AttackConfigError, ShapeError
from ..models import AttackConfig, AttackFamily, DefenseConfig, GradMode
from ..nn import Classifier, Detector, ModelParams, cross_entropy, one_hot
from ..tensor import Tape, Tensor, backward, relu
from ..utils import chunk_ranges, parallel_map

logger = logging.getLogger(__name__)

Objective = Literal["ce", "cw"]
StepCallback = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]
PatchArg = PatchSpec | Sequence[PatchSpec] | np.ndarray

# Logit offset that removes the true class from the runner-up max.
_MASK_OFFSET = 1e9


@dataclass(eq=False)
class AttackTarget:
    """What the attacker differentiates through: the bare classifier, or the whole defense."""

    classifier: ModelFn
    detector: Optional[ModelFn] = None
    defense: Optional[DefenseConfig] = None
    mean: Optional[np.ndarray] = None
    # Detector parameter version the target was built from (stage-2 freshness checks).
    param_version: Optional[int] = None

    @classmethod
    def from_params(
        cls,
        classifier: ModelParams,
        detector: Optional[ModelParams] = None,
        defense: Optional[DefenseConfig] = None,
        mean: Optional[np.ndarray] = None,
    ) -> "AttackTarget":
        return cls(
            classifier=Classifier(classifier.frozen()),
            detector=Detector(detector.frozen()) if detector is not None else None,
            defense=defense,
            mean=mean,
            param_version=detector.version if detector is not None else None,
        )

    def logits(self, x: Tensor, grad_mode: GradMode) -> Tensor:
        if grad_mode == GradMode.DO:
            return self.classifier(x)
        if self.detector is None or self.defense is None:
            raise AttackConfigError("BPDA gradients need a detector and a defense config")
        return pipeline_forward_bpda(self.detector, self.classifier, x, self.defense, self.mean).logits


@dataclass(eq=False)
class MaskedExample:
    """Attack result for a batch of examples (leading axis N everywhere)."""

    original: np.ndarray
    adversarial: np.ndarray
    gt_mask: np.ndarray  # [N,H,W] uint8, 0 = patch
    labels: np.ndarray
    objective: np.ndarray  # best per-example loss (CE) or margin (CW)
    loss_trace: np.ndarray  # [steps, N] best-so-far objective
    specs: Optional[List[PatchSpec]] = None
    param_version: Optional[int] = None

    def __len__(self) -> int:
        return int(self.original.shape[0])


def cw_margin(logits: Tensor, y: np.ndarray, kappa: float = 0.0) -> Tensor:
    """max(z_y - max_{i != y} z_i, -kappa) per row."""
    targets = one_hot(y, logits.shape[1])
    true_logit = (logits * targets).sum(axis=1)
    runner_up = (logits - targets * _MASK_OFFSET).max(axis=1)
    return relu(true_logit - runner_up + kappa) - kappa


def attack_gradient(
    grad_mode: GradMode,
    target: AttackTarget,
    x_adv: np.ndarray,
    y: np.ndarray,
    objective: Objective = "ce",
    kappa: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-example objective and its gradient w.r.t. the input, on a private tape."""
    x = Tensor(x_adv, requires_grad=True)
    with Tape():
        logits = target.logits(x, grad_mode)
        if objective == "ce":
            per_example = cross_entropy(logits, y, reduction="none")
        else:
            per_example = cw_margin(logits, y, kappa)
        backward(per_example.sum())
    grad = x.grad if x.grad is not None else np.zeros_like(x.data)
    return grad, per_example.data.copy()


def patch_region(masks: np.ndarray) -> np.ndarray:
    """[N,1,H,W] boolean view of the patch pixels."""
    return (np.asarray(masks) == 0)[:, None]


def project(candidate: np.ndarray, x_orig: np.ndarray, eps: float, region: np.ndarray) -> np.ndarray:
    """Clip into the eps-box and [0,1] inside the patch; outside pixels are the original."""
    boxed = np.clip(np.clip(candidate, x_orig - eps, x_orig + eps), 0.0, 1.0)
    return np.where(region, boxed, x_orig).astype(x_orig.dtype, copy=False)


def apply_patch_update(
    x_adv: np.ndarray,
    grad: np.ndarray,
    masks: np.ndarray,
    cfg: AttackConfig,
    x_orig: np.ndarray,
    step_size: float | np.ndarray | None = None,
) -> np.ndarray:
    alpha = cfg.alpha if step_size is None else np.asarray(step_size, dtype=x_adv.dtype).reshape(-1, 1, 1, 1)
    candidate = x_adv + alpha * np.sign(grad)
    candidate = np.clip(np.clip(candidate, x_orig - cfg.eps, x_orig + cfg.eps), 0.0, 1.0)
    return np.where(patch_region(masks), candidate, x_adv).astype(x_adv.dtype, copy=False)


def random_start(
    x_orig: np.ndarray, region: np.ndarray, eps: float, seed: int, example_ids: np.ndarray, restart: int
) -> np.ndarray:
    """Uniform patch pixels in [max(0,X-eps), min(1,X+eps)], one stream per (seed, example, restart)."""
    lo = np.maximum(0.0, x_orig - eps)
    hi = np.minimum(1.0, x_orig + eps)
    noise = np.stack(
        [np.random.default_rng([seed, int(i), restart]).uniform(size=x_orig.shape[1:]) for i in example_ids]
    )
    start = lo + noise * (hi - lo)
    return np.where(region, start, x_orig).astype(x_orig.dtype, copy=False)


def as_masks(patch: PatchArg, n: int, height: int, width: int) -> Tuple[np.ndarray, Optional[List[PatchSpec]]]:
    if isinstance(patch, PatchSpec):
        specs = [patch] * n
    elif isinstance(patch, np.ndarray):
        masks = patch.astype(np.uint8)
        if masks.shape != (n, height, width):
            raise ShapeError(f"patch masks {list(masks.shape)} do not match {n} images of {height}x{width}")
        return masks, None
    else:
        specs = list(patch)
    if len(specs) != n:
        raise ShapeError(f"{len(specs)} patch specs for {n} images")
    return rasterize_masks(specs, height, width), specs


@dataclass(eq=False)
class ShardResult:
    adversarial: np.ndarray
    objective: np.ndarray
    trace: np.ndarray


class MaskedAttack:
    """Shared driver: restarts, shard fan-out and result assembly; subclasses supply one restart."""

    family: AttackFamily
    objective: Objective = "ce"
    maximize: bool = True

    def __init__(self, cfg: AttackConfig) -> None:
        if cfg.family != self.family:
            raise AttackConfigError(f"{type(self).__name__} needs family {self.family.value}, got {cfg.family.value}")
        self.cfg = cfg

    def gradient(self, target: AttackTarget, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return attack_gradient(self.cfg.grad_mode, target, x, y, self.objective, self.cfg.kappa)

    def run_restart(
        self,
        target: AttackTarget,
        x_orig: np.ndarray,
        y: np.ndarray,
        masks: np.ndarray,
        example_ids: np.ndarray,
        restart: int,
        on_step: Optional[StepCallback],
    ) -> ShardResult:
        raise NotImplementedError

    def _better(self, new: np.ndarray, old: np.ndarray) -> np.ndarray:
        return new > old if self.maximize else new < old

    def attack_shard(
        self,
        target: AttackTarget,
        x_orig: np.ndarray,
        y: np.ndarray,
        masks: np.ndarray,
        example_ids: np.ndarray,
        on_step: Optional[StepCallback] = None,
    ) -> ShardResult:
        best: Optional[ShardResult] = None
        traces = []
        for restart in range(self.cfg.restarts):
            result = self.run_restart(target, x_orig, y, masks, example_ids, restart, on_step)
            if best is None:
                best = result
                traces.append(result.trace)
                continue
            take = self._better(result.objective, best.objective)
            best = ShardResult(
                adversarial=np.where(take[:, None, None, None], result.adversarial, best.adversarial),
                objective=np.where(take, result.objective, best.objective),
                trace=best.trace,
            )
            pick = np.maximum if self.maximize else np.minimum
            traces.append(pick(result.trace, traces[-1][-1][None]))
        best.trace = np.concatenate(traces, axis=0)
        return best

    def __call__(
        self,
        target: AttackTarget,
        images: np.ndarray,
        labels: np.ndarray,
        patch: PatchArg,
        example_ids: Optional[Sequence[int]] = None,
        on_step: Optional[StepCallback] = None,
    ) -> MaskedExample:
        images = np.asarray(images)
        labels = np.asarray(labels, dtype=np.int64)
        n, _, height, width = images.shape
        masks, specs = as_masks(patch, n, height, width)
        ids = np.arange(n) if example_ids is None else np.asarray(example_ids, dtype=np.int64)

        def run(shard: range) -> ShardResult:
            sl = slice(shard.start, shard.stop)
            return self.attack_shard(target, images[sl], labels[sl], masks[sl], ids[sl], on_step)

        shards = chunk_ranges(n, shard_size())
        logger.debug("%s/%s on %d examples in %d shards", self.family.value, self.cfg.grad_mode.value, n, len(shards))
        results = parallel_map(run, shards)
        return MaskedExample(
            original=images,
            adversarial=np.concatenate([r.adversarial for r in results]) if results else images.copy(),
            gt_mask=masks,
            labels=labels,
            objective=np.concatenate([r.objective for r in results]) if results else np.zeros(0),
            loss_trace=np.concatenate([r.trace for r in results], axis=1) if results else np.zeros((0, 0)),
            specs=specs,
            param_version=target.param_version,
        )
