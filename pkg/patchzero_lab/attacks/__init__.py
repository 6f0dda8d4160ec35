from typing import Dict, Optional, Sequence, Type

import numpy as np

from ..models import AttackConfig, AttackFamily
from .autopgd import MaskedAutoPGD, checkpoint_schedule, halve_at_checkpoint, masked_autopgd
from .base import (
    AttackTarget,
    MaskedAttack,
    MaskedExample,
    PatchArg,
    StepCallback,
    apply_patch_update,
    attack_gradient,
    cw_margin,
)
from .cw import MaskedCW, masked_cw
from .pgd import MaskedPGD, masked_pgd

ATTACKS: Dict[AttackFamily, Type[MaskedAttack]] = {
    AttackFamily.MPGD: MaskedPGD,
    AttackFamily.MAPGD: MaskedAutoPGD,
    AttackFamily.MCW: MaskedCW,
}


def run_attack(
    target: AttackTarget,
    images: np.ndarray,
    labels: np.ndarray,
    patch: PatchArg,
    cfg: AttackConfig,
    example_ids: Optional[Sequence[int]] = None,
    on_step: Optional[StepCallback] = None,
) -> MaskedExample:
    return ATTACKS[cfg.family](cfg)(target, images, labels, patch, example_ids, on_step)


__all__ = [
    "ATTACKS",
    "AttackTarget",
    "MaskedAttack",
    "MaskedAutoPGD",
    "MaskedCW",
    "MaskedExample",
    "MaskedPGD",
    "apply_patch_update",
    "attack_gradient",
    "checkpoint_schedule",
    "cw_margin",
    "halve_at_checkpoint",
    "masked_autopgd",
    "masked_cw",
    "masked_pgd",
    "run_attack",
]
