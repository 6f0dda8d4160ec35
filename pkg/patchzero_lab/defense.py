"""
The sanitizing pipeline: probability map -> binarize -> dilate -> zero-out -> classifier.

`pipeline_forward_bpda` keeps the hard mask in the forward pass but routes the backward
pass through a sigmoid surrogate of the threshold, so an adaptive attacker can push
gradients through the detector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DomainError, ShapeError
from .models import DefenseConfig
from .tensor import Tensor, as_tensor, reshape, sigmoid, straight_through, window_min

logger = logging.getLogger(__name__)

@runtime_checkable
class ModelFn(Protocol):
    """Anything that maps an image batch to an output tensor: bound `Classifier`/`Detector` or a test stub."""

    def __call__(self, x: Tensor, /) -> Tensor: ...


@dataclass(eq=False)
class PipelineOutput:
    prediction: np.ndarray  # [N] argmax of the classifier on the sanitized input
    mask: np.ndarray  # [N,H,W] uint8, dilated, 0 = zeroed out
    sanitized: Tensor  # [N,C,H,W]
    logits: Tensor  # [N,K]
    prob: np.ndarray  # [N,H,W] raw detector output


def binarize(p: np.ndarray | Tensor, eps_p: float) -> np.ndarray:
    """1 where p >= eps_p (a tie counts as benign), 0 elsewhere."""
    values = p.data if isinstance(p, Tensor) else np.asarray(p)
    return (values >= eps_p).astype(np.uint8)


def sigmoid_surrogate(p: Tensor, eps_p: float, k: float) -> Tensor:
    return sigmoid((as_tensor(p) - eps_p) * k)


def _check_binary(mask: np.ndarray) -> None:
    if not np.all((mask == 0) | (mask == 1)):
        raise DomainError("mask must be strictly binary")


def dilate_zero_region(mask: np.ndarray, radius: int) -> np.ndarray:
    """Grow the zero set by a (2r+1)x(2r+1) square; pixels past the border count as benign."""
    if radius < 0:
        raise DomainError(f"dilation radius must be >= 0, got {radius}")
    mask = np.asarray(mask)
    _check_binary(mask)
    if radius == 0:
        return mask.astype(np.uint8, copy=True)
    side = 2 * radius + 1
    size = (1,) * (mask.ndim - 2) + (side, side)
    return ndimage.minimum_filter(mask.astype(np.uint8), size=size, mode="constant", cval=1)


def resolve_mean(cfg: DefenseConfig, mean: Optional[Sequence[float] | np.ndarray] = None) -> np.ndarray:
    if mean is not None:
        return np.asarray(mean, dtype=np.float64)
    if cfg.mean_pixel is None:
        raise ConfigError("defense.mean_pixel is not set and no dataset mean was supplied")
    return np.asarray(cfg.mean_pixel, dtype=np.float64)


def zero_out(x: Tensor | np.ndarray, mask: Tensor | np.ndarray, mean: Sequence[float] | np.ndarray) -> Tensor:
    """X * M + mean * (1 - M), with M broadcast over channels and mean over pixels."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("zero_out expects images [N,C,H,W]")
    n, c, h, w = x.shape
    m = mask if isinstance(mask, Tensor) else Tensor._wrap(np.asarray(mask, dtype=x.data.dtype), requires_grad=False)
    _check_binary(m.data)
    if m.shape != (n, h, w):
        raise ShapeError(f"mask {list(m.shape)} does not match images {list(x.shape)}")
    fill = np.asarray(mean, dtype=x.data.dtype)
    if fill.shape != (c,):
        raise ShapeError(f"mean pixel has shape {list(fill.shape)}, expected [{c}]")
    m4 = reshape(m, (n, 1, h, w))
    return x * m4 + (1.0 - m4) * fill.reshape(1, c, 1, 1)


def defend_with_mask(
    classifier: ModelFn,
    x: Tensor | np.ndarray,
    mask: np.ndarray,
    cfg: DefenseConfig,
    mean: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Predictions after zeroing out a given (e.g. ground-truth) mask, dilated by cfg.dilation_radius."""
    sanitized = zero_out(x, dilate_zero_region(mask, cfg.dilation_radius), resolve_mean(cfg, mean))
    return classifier(sanitized).data.argmax(axis=1)


def pipeline_forward(
    detector: ModelFn,
    classifier: ModelFn,
    x: Tensor | np.ndarray,
    cfg: DefenseConfig,
    mean: Optional[np.ndarray] = None,
) -> PipelineOutput:
    x = as_tensor(x)
    p = detector(x)
    mask = dilate_zero_region(binarize(p, cfg.eps_p), cfg.dilation_radius)
    sanitized = zero_out(x, mask, resolve_mean(cfg, mean))
    logits = classifier(sanitized)
    return PipelineOutput(
        prediction=logits.data.argmax(axis=1), mask=mask, sanitized=sanitized, logits=logits, prob=p.data.copy()
    )


def pipeline_forward_bpda(
    detector: ModelFn,
    classifier: ModelFn,
    x: Tensor,
    cfg: DefenseConfig,
    mean: Optional[np.ndarray] = None,
) -> PipelineOutput:
    """Same forward values as `pipeline_forward`; backward substitutes h'(p) for binarize+dilate."""
    p = detector(x)
    hard = dilate_zero_region(binarize(p, cfg.eps_p), cfg.dilation_radius)
    soft = sigmoid_surrogate(p, cfg.eps_p, cfg.k)
    if cfg.soften_dilation and cfg.dilation_radius > 0:
        soft = window_min(soft, cfg.dilation_radius)
    mask = straight_through(hard, soft)
    sanitized = zero_out(x, mask, resolve_mean(cfg, mean))
    logits = classifier(sanitized)
    return PipelineOutput(
        prediction=logits.data.argmax(axis=1), mask=hard, sanitized=sanitized, logits=logits, prob=p.data.copy()
    )
