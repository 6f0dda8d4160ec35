"""
Masked AutoPGD: momentum steps plus a step size that halves at scheduled checkpoints
when progress stalls, resuming from the best iterate found so far.
"""

from __future__ import annotations

import logging
import math
from typing import List, Optional, Sequence

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
    project,
    random_start,
)

logger = logging.getLogger(__name__)

FIRST_CHECKPOINT = 0.22
INTERVAL_SHRINK = 0.03
MIN_INTERVAL = 0.06


def checkpoint_schedule(iters: int) -> List[int]:
    """Iterations ceil(p_j * T) with p_1 = 0.22 and intervals shrinking by 0.03, floored at 0.06."""
    fractions = [0.0, FIRST_CHECKPOINT]
    while fractions[-1] < 1.0:
        interval = max(fractions[-1] - fractions[-2] - INTERVAL_SHRINK, MIN_INTERVAL)
        fractions.append(fractions[-1] + interval)
    # Rounding first keeps accumulated float error from pushing ceil() up by one.
    points = sorted({math.ceil(round(p * iters, 9)) for p in fractions[1:] if p <= 1.0})
    return [w for w in points if 0 < w <= iters]


def halve_at_checkpoint(
    stalled: np.ndarray,
    reduced_last_check: np.ndarray,
    best_loss: np.ndarray,
    best_at_checkpoint: np.ndarray,
) -> np.ndarray:
    """
    Per-example step-halving decision at a checkpoint: the loss rose in fewer than rho of
    the window's steps, or the previous checkpoint kept the step and the best loss has not
    grown since then.
    """
    return stalled | (~reduced_last_check & (best_loss <= best_at_checkpoint))


class MaskedAutoPGD(MaskedAttack):
    family = AttackFamily.MAPGD

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
        region = patch_region(masks)
        n = x_orig.shape[0]
        blend = 1.0 - cfg.momentum
        checkpoints = set(checkpoint_schedule(cfg.iters)) if cfg.step_halving else set()

        x = random_start(x_orig, region, cfg.eps, cfg.seed, example_ids, restart)
        grad, loss = self.gradient(target, x, y)
        best_x, best_loss, best_grad = x.copy(), loss.copy(), grad.copy()
        trace = [best_loss.copy()]

        eta = np.full(n, cfg.alpha, dtype=np.float64)
        x_prev = x
        improvements = np.zeros(n, dtype=np.int64)
        last_checkpoint = 0
        reduced_last_check = np.zeros(n, dtype=bool)
        best_at_checkpoint = best_loss.copy()

        for step in range(cfg.iters):
            z = apply_patch_update(x, grad, masks, cfg, x_orig, step_size=eta)
            if step == 0 or cfg.momentum == 0.0:
                x_next = z
            else:
                x_next = project(x + blend * (z - x) + (1.0 - blend) * (x - x_prev), x_orig, cfg.eps, region)
            x_prev, x = x, x_next
            grad, new_loss = self.gradient(target, x, y)
            improvements += new_loss > loss
            loss = new_loss

            improved = loss > best_loss
            best_x[improved] = x[improved]
            best_grad[improved] = grad[improved]
            best_loss = np.where(improved, loss, best_loss)
            trace.append(best_loss.copy())
            if on_step is not None:
                on_step(step, x, loss, example_ids)

            if step + 1 in checkpoints:
                window = step + 1 - last_checkpoint
                stalled = improvements < cfg.rho * window
                halve = halve_at_checkpoint(stalled, reduced_last_check, best_loss, best_at_checkpoint)
                eta = np.where(halve, eta / 2.0, eta)
                x = np.where(halve[:, None, None, None], best_x, x)
                x_prev = np.where(halve[:, None, None, None], best_x, x_prev)
                grad = np.where(halve[:, None, None, None], best_grad, grad)
                loss = np.where(halve, best_loss, loss)
                logger.debug("MAPGD checkpoint %d: halved step on %d/%d examples", step + 1, int(halve.sum()), n)
                improvements[:] = 0
                last_checkpoint = step + 1
                reduced_last_check = halve
                best_at_checkpoint = best_loss.copy()

        return ShardResult(adversarial=best_x, objective=best_loss, trace=np.stack(trace))


def masked_autopgd(
    target: AttackTarget,
    images: np.ndarray,
    labels: np.ndarray,
    patch: PatchArg,
    cfg: AttackConfig,
    example_ids: Optional[Sequence[int]] = None,
    on_step: Optional[StepCallback] = None,
) -> MaskedExample:
    return MaskedAutoPGD(cfg)(target, images, labels, patch, example_ids, on_step)
