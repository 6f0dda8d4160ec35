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
    patch_region,
    project,
    random_start,
)

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class MaskedCW(MaskedAttack):
    """Adam descent on the logit margin max(z_y - max_{i!=y} z_i, -kappa), in pixel space.

    The first restart starts from the clean image; later restarts start from a random
    point in the eps-box. An example stops moving once its margin reaches -kappa.
    """

    family = AttackFamily.MCW
    objective = "cw"
    maximize = False

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
        x = x_orig.copy() if restart == 0 else random_start(x_orig, region, cfg.eps, cfg.seed, example_ids, restart)
        grad, margin = self.gradient(target, x, y)
        best_x, best_margin = x.copy(), margin.copy()
        done = best_margin <= -cfg.kappa
        trace = [best_margin.copy()]

        m = np.zeros(x.shape, dtype=np.float64)
        v = np.zeros(x.shape, dtype=np.float64)
        for step in range(cfg.iters):
            if done.all():
                break
            t = step + 1
            m = BETA1 * m + (1.0 - BETA1) * grad
            v = BETA2 * v + (1.0 - BETA2) * grad * grad
            update = cfg.alpha * (m / (1.0 - BETA1**t)) / (np.sqrt(v / (1.0 - BETA2**t)) + ADAM_EPS)
            candidate = project(x - update, x_orig, cfg.eps, region)
            x = np.where(done[:, None, None, None], x, candidate)
            grad, margin = self.gradient(target, x, y)

            improved = (margin < best_margin) & ~done
            best_x[improved] = x[improved]
            best_margin = np.where(improved, margin, best_margin)
            done |= best_margin <= -cfg.kappa
            trace.append(best_margin.copy())
            if on_step is not None:
                on_step(step, x, margin, example_ids)

        # Pad an early stop so every shard reports iters + 1 rows.
        trace.extend([best_margin.copy()] * (cfg.iters + 1 - len(trace)))
        logger.debug("MCW restart %d: %d/%d examples reached the margin", restart, int(done.sum()), len(done))
        return ShardResult(adversarial=best_x, objective=best_margin, trace=np.stack(trace))


def masked_cw(
    target: AttackTarget,
    images: np.ndarray,
    labels: np.ndarray,
    patch: PatchArg,
    cfg: AttackConfig,
    example_ids: Optional[Sequence[int]] = None,
    on_step: Optional[StepCallback] = None,
) -> MaskedExample:
    return MaskedCW(cfg)(target, images, labels, patch, example_ids, on_step)
