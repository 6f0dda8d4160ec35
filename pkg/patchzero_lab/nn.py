"""
Fixed small architectures on top of `tensor`:

- TinyCNN classifier f: conv1(16, 3x3) -> relu -> pool -> conv2(32, 3x3) -> relu -> pool -> fc.
- TinyUNet patch detector d: enc1(8, 3x3) -> pool -> enc2(16, 5x5) -> upsample -> concat(enc1)
  -> dec1(8, 3x3) -> head(1, 1x1) -> sigmoid, with an optional 1x1 auxiliary head on the bottleneck.

The detector outputs the probability that a pixel is BENIGN, so thresholding it directly
gives a mask with 1 = keep and 0 = zero-out. No batch normalization is used anywhere,
which keeps every example's forward pass independent of the rest of its batch.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Literal, Mapping, Optional, Tuple

import numpy as np

from .errors import DomainError, ShapeError, TrainingDivergedError
from .tensor import (
    Tape,
    Tensor,
    backward,
    clip,
    concat,
    conv2d,
    default_dtype,
    exp,
    log,
    matmul,
    pool_avg2x,
    relu,
    reshape,
    sigmoid,
    transpose,
    upsample_nearest2x,
    zero_grads,
)

logger = logging.getLogger(__name__)

ModelKind = Literal["classifier", "detector"]

BCE_CLAMP = 1e-7


@dataclass(eq=False)
class ModelParams:
    kind: ModelKind
    tensors: Dict[str, Tensor]
    # Bumped by every optimizer step; attacks record the version they ran against.
    version: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def copy(self) -> "ModelParams":
        return type(self)(
            kind=self.kind,
            tensors={name: Tensor(t.data, requires_grad=t.requires_grad, dtype=t.data.dtype) for name, t in self.items()},
            version=self.version,
        )

    def frozen(self) -> "ModelParams":
        """Read-only view sharing storage; gradients never flow into it."""
        return type(self)(
            kind=self.kind,
            tensors={name: t.detach() for name, t in self.items()},
            version=self.version,
        )


@dataclass(eq=False)
class ClassifierParams(ModelParams):
    kind: ModelKind = "classifier"
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return int(self.tensors["fc.bias"].shape[0])


@dataclass(eq=False)
class DetectorParams(ModelParams):
    kind: ModelKind = "detector"
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def has_aux(self) -> bool:
        return "aux_head.weight" in self.tensors


def params_digest(params: ModelParams) -> str:
    digest = hashlib.sha256(params.kind.encode())
    for name, tensor in params.items():
        digest.update(name.encode())
        digest.update(np.asarray(tensor.shape, dtype=np.int64).tobytes())
        digest.update(np.ascontiguousarray(tensor.data).tobytes())
    return digest.hexdigest()


def _kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    arch: ModelKind,
    seed: int,
    in_channels: int = 3,
    image_size: int = 32,
    num_classes: int = 4,
    with_aux: bool = True,
) -> ModelParams:
    """Kaiming-uniform (fan-in) weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    dtype = default_dtype()
    layers: List[Tuple[str, Tuple[int, ...]]]
    if arch == "classifier":
        if image_size % 4:
            raise ShapeError(f"classifier needs an image size divisible by 4, got {image_size}")
        flat = 32 * (image_size // 4) ** 2
        layers = [
            ("conv1", (16, in_channels, 3, 3)),
            ("conv2", (32, 16, 3, 3)),
            ("fc", (num_classes, flat)),
        ]
    elif arch == "detector":
        layers = [
            ("enc1", (8, in_channels, 3, 3)),
            ("enc2", (16, 8, 5, 5)),
            ("dec1", (8, 24, 3, 3)),
            ("head", (1, 8, 1, 1)),
        ]
        if with_aux:
            layers.append(("aux_head", (1, 16, 1, 1)))
    else:
        raise ValueError(f"unknown architecture: {arch}")

    tensors: Dict[str, Tensor] = {}
    for name, shape in layers:
        fan_in = int(np.prod(shape[1:]))
        tensors[f"{name}.weight"] = Tensor(_kaiming_uniform(rng, shape, fan_in), requires_grad=True, dtype=dtype)
        tensors[f"{name}.bias"] = Tensor(np.zeros(shape[0]), requires_grad=True, dtype=dtype)
    params_cls = ClassifierParams if arch == "classifier" else DetectorParams
    return params_cls(kind=arch, tensors=tensors)


def classifier_forward(params: ModelParams, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != params["conv1.weight"].shape[1]:
        raise ShapeError(f"classifier input {list(x.shape)} does not match conv1 {list(params['conv1.weight'].shape)}")
    h = relu(conv2d(x, params["conv1.weight"], params["conv1.bias"], stride=1, padding=1))
    h = pool_avg2x(h)
    h = relu(conv2d(h, params["conv2.weight"], params["conv2.bias"], stride=1, padding=1))
    h = pool_avg2x(h)
    n = h.shape[0]
    flat = reshape(h, (n, -1))
    if flat.shape[1] != params["fc.weight"].shape[1]:
        raise ShapeError(f"flattened features {flat.shape[1]} do not match fc {list(params['fc.weight'].shape)}")
    return matmul(flat, transpose(params["fc.weight"])) + params["fc.bias"]


def detector_forward(params: ModelParams, x: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
    """Return (p [N,H,W], aux [N,H/2,W/2] or None); p is the per-pixel probability of benign."""
    if x.ndim != 4:
        raise ShapeError("detector expects [N,C,H,W]")
    n, _, height, width = x.shape
    if height % 2 or width % 2:
        raise ShapeError(f"detector needs even spatial dims, got {height}x{width}")
    e1 = relu(conv2d(x, params["enc1.weight"], params["enc1.bias"], stride=1, padding=1))
    e2 = relu(conv2d(pool_avg2x(e1), params["enc2.weight"], params["enc2.bias"], stride=1, padding=2))
    d1 = relu(conv2d(concat([e1, upsample_nearest2x(e2)], axis=1), params["dec1.weight"], params["dec1.bias"], stride=1, padding=1))
    p = reshape(sigmoid(conv2d(d1, params["head.weight"], params["head.bias"])), (n, height, width))
    aux = None
    if "aux_head.weight" in params:
        aux_logits = conv2d(e2, params["aux_head.weight"], params["aux_head.bias"])
        aux = reshape(sigmoid(aux_logits), (n, height // 2, width // 2))
    return p, aux


class Classifier:
    def __init__(self, params: ModelParams) -> None:
        self.params = params

    def __call__(self, x: Tensor) -> Tensor:
        return classifier_forward(self.params, x)

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        if len(images) == 0:
            return np.zeros(0, dtype=np.int64)
        chunks = [self(Tensor(images[i : i + batch_size])).data.argmax(axis=1) for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks)


class Detector:
    def __init__(self, params: ModelParams) -> None:
        self.params = params

    def __call__(self, x: Tensor) -> Tensor:
        return detector_forward(self.params, x)[0]

    def forward_with_aux(self, x: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        return detector_forward(self.params, x)

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Benign-probability maps [N,H,W] computed in chunks."""
        chunks = [self(Tensor(images[i : i + batch_size])).data for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0,) + tuple(images.shape[2:]))


def _labels(y: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(y, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    return labels


def one_hot(y: np.ndarray, num_classes: int) -> np.ndarray:
    labels = _labels(y, num_classes)
    return np.eye(num_classes, dtype=default_dtype())[labels]


def log_softmax(logits: Tensor) -> Tensor:
    # Subtracting the (constant) row max keeps exp() in range.
    shifted = logits - logits.data.max(axis=1, keepdims=True)
    return shifted - log(exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, y: np.ndarray, reduction: Literal["mean", "sum", "none"] = "mean") -> Tensor:
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects logits [N,K]")
    n, k = logits.shape
    targets = one_hot(y, k)
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} labels for {n} rows of logits")
    losses = -(log_softmax(logits) * targets).sum(axis=1)
    if reduction == "none":
        return losses
    return losses.sum() if reduction == "sum" else losses.mean()


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """2x reduction of a [N,H,W] mask; a block is benign only if all four pixels are."""
    n, h, w = mask.shape
    return mask.reshape(n, h // 2, 2, w // 2, 2).min(axis=(2, 4))


def _bce(p: Tensor, target: np.ndarray) -> Tensor:
    pc = clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = np.asarray(target, dtype=p.data.dtype)
    return -(log(pc) * t + log(1.0 - pc) * (1.0 - t)).mean()


def pixel_bce(p: Tensor, gt_mask: np.ndarray, aux: Optional[Tensor] = None, aux_weight: float = 0.4) -> Tensor:
    gt = np.asarray(gt_mask)
    if p.shape != gt.shape:
        raise ShapeError(f"prob map {list(p.shape)} and mask {list(gt.shape)} differ")
    loss = _bce(p, gt)
    if aux is not None and aux_weight > 0:
        target = downsample_mask(gt)
        if aux.shape != target.shape:
            raise ShapeError(f"aux map {list(aux.shape)} and downsampled mask {list(target.shape)} differ")
        loss = loss + aux_weight * _bce(aux, target)
    return loss


@dataclass(eq=False)
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> Tuple[ModelParams, AdamState]:
    """Bias-corrected Adam, applied in place; refuses non-finite gradients."""
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != tensor.shape or state.m[name].shape != tensor.shape:
            raise ShapeError(f"gradient for {name} has shape {list(grad.shape)}, expected {list(tensor.shape)}")
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"non-finite gradient for {name}")

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor.data -= update.astype(tensor.data.dtype, copy=False)
    params.version += 1
    return params, state


def gradients(params: ModelParams) -> Dict[str, np.ndarray]:
    return {name: t.grad if t.grad is not None else np.zeros_like(t.data) for name, t in params.items()}


def loss_and_step(
    params: ModelParams,
    state: AdamState,
    lr: float,
    loss_fn: Callable[[], Tensor],
) -> float:
    """One optimizer step: fresh tape, forward via `loss_fn`, backward, Adam."""
    zero_grads(t for _, t in params.items())
    with Tape():
        loss = loss_fn()
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value}")
        backward(loss)
    adam_step(params, gradients(params), state, lr)
    return value
