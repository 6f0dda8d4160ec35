from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

from ..models import AttackConfig, AttackFamily
from .base import (
    AttackTarget,
    MaskedAttack,
    MaskedExample,
    PatchArg,
    ShardResult,
    StepCallback,
    apply_patch_update,
    patch_region,
    random_start,
)

logger = logging.getLogger(__name__)


class MaskedPGD(MaskedAttack):
    """Sign-gradient ascent on cross-entropy, confined to the patch and the eps-box."""

    family = AttackFamily.MPGD

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
        cfg = self.cfg
        x = random_start(x_orig, patch_region(masks), cfg.eps, cfg.seed, example_ids, restart)
        grad, loss = self.gradient(target, x, y)
        best_x, best_loss = x.copy(), loss.copy()
        trace = [best_loss.copy()]
        for step in range(cfg.iters):
            x = apply_patch_update(x, grad, masks, cfg, x_orig)
            grad, loss = self.gradient(target, x, y)
            improved = loss > best_loss
            best_x[improved] = x[improved]
            best_loss = np.where(improved, loss, best_loss)
            trace.append(best_loss.copy())
            if on_step is not None:
                on_step(step, x, loss, example_ids)
        logger.debug("MPGD restart %d: mean best loss %.4f", restart, float(best_loss.mean()))
        return ShardResult(adversarial=best_x, objective=best_loss, trace=np.stack(trace))


def masked_pgd(
    target: AttackTarget,
    images: np.ndarray,
    labels: np.ndarray,
    patch: PatchArg,
    cfg: AttackConfig,
    example_ids: Optional[Sequence[int]] = None,
    on_step: Optional[StepCallback] = None,
) -> MaskedExample:
    return MaskedPGD(cfg)(target, images, labels, patch, example_ids, on_step)
