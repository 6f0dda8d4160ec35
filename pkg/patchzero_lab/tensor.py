"""
Minimal dense tensors with a reverse-mode gradient tape.

Operations record themselves on the thread's active `Tape` whenever one of their
inputs requires a gradient; outside a tape they are plain numpy computations.
`backward(loss)` walks the tape in reverse and accumulates (+=) into the `grad`
buffer of every leaf tensor that requires one. Conventions the tests rely on:

- broadcasting follows numpy: trailing axes align and a size-1 axis stretches;
- conv2d is a cross-correlation (no kernel flip) with zero padding;
- `sign` is gradient-opaque (zero gradient everywhere);
- max-reduce routes its gradient to the first maximal element by linear index;
- `clip` passes gradient only strictly inside (lo, hi).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .config import checked_ops_default
from .errors import DomainError, ShapeError, TapeError

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def checked_ops() -> bool:
    checked = getattr(_state, "checked", None)
    return checked_ops_default() if checked is None else checked


@contextmanager
def precision(dtype: str = "float64", checked: bool = True) -> Iterator[None]:
    """Switch the thread's default dtype (64-bit for gradient verification) and checked mode."""
    saved = (getattr(_state, "dtype", None), getattr(_state, "checked", None))
    _state.dtype = np.dtype(dtype)
    _state.checked = checked
    try:
        yield
    finally:
        if saved[0] is None:
            del _state.dtype
        else:
            _state.dtype = saved[0]
        _state.checked = saved[1]


@dataclass(eq=False)
class Node:
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    backward_fn: BackwardFn
    tape: "Tape"
    index: int


@dataclass(eq=False)
class Tape:
    """Ordered record of operations; recording order is a topological order."""

    nodes: List[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _state.tapes.pop()

    def record(self, inputs: Tuple["Tensor", ...], output: "Tensor", backward_fn: BackwardFn) -> Node:
        node = Node(inputs=inputs, output=output, backward_fn=backward_fn, tape=self, index=len(self.nodes))
        self.nodes.append(node)
        return node


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[np.dtype] = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or default_dtype(), copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[Node] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = requires_grad
        out.grad = None
        out.tape_node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return elementwise(self, other, "add")

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return elementwise(other, self, "add")

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return elementwise(self, other, "sub")

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return elementwise(other, self, "sub")

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return elementwise(self, other, "mul")

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return elementwise(other, self, "mul")

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return elementwise(self, other, "div")

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return elementwise(other, self, "div")

    def __neg__(self) -> "Tensor":
        return unary(self, "neg")

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Union[int, Sequence[int], None] = None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis: Union[int, Sequence[int], None] = None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis: Union[int, Sequence[int], None] = None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "max", axis, keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor_new(shape: Sequence[int], data: Sequence[float], requires_grad: bool = False) -> Tensor:
    dims = [int(d) for d in shape]
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    flat = np.asarray(data, dtype=default_dtype()).reshape(-1)
    expected = int(np.prod(dims))
    if flat.size != expected:
        raise ShapeError(f"data length {flat.size} does not match shape {dims} ({expected})")
    return Tensor(flat.reshape(dims), requires_grad=requires_grad)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=default_dtype()), requires_grad=False)


def _record(array: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(array, requires_grad=needs_grad)
    if needs_grad:
        out.tape_node = tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    stretched = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if stretched:
        grad = grad.sum(axis=stretched, keepdims=True)
    return grad.reshape(shape)


def elementwise(a: ArrayLike, b: ArrayLike, kind: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {list(a.shape)} with {list(b.shape)}") from exc
    x, y = a.data, b.data

    if kind == "add":
        out = x + y
        backward_fn = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))
    elif kind == "sub":
        out = x - y
        backward_fn = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))
    elif kind == "mul":
        out = x * y
        backward_fn = lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))
    elif kind == "div":
        # Division by zero propagates inf/nan; callers keep denominators away from zero.
        with np.errstate(divide="ignore", invalid="ignore"):
            out = x / y

        def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            with np.errstate(divide="ignore", invalid="ignore"):
                return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)
    else:
        raise ValueError(f"unknown elementwise kind: {kind}")
    return _record(out, (a, b), backward_fn)


def unary(a: ArrayLike, kind: str) -> Tensor:
    a = as_tensor(a)
    x = a.data

    if kind == "neg":
        out = -x
        backward_fn = lambda g: (-g,)
    elif kind == "relu":
        out = np.maximum(x, 0)
        backward_fn = lambda g: (g * (x > 0),)
    elif kind == "sigmoid":
        out = expit(x)
        backward_fn = lambda g: (g * out * (1 - out),)
    elif kind == "exp":
        out = np.exp(x)
        backward_fn = lambda g: (g * out,)
    elif kind == "log":
        if checked_ops() and np.any(x <= 0):
            raise DomainError("log of a non-positive value")
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)
        backward_fn = lambda g: (g / x,)
    elif kind == "sign":
        out = np.sign(x)
        backward_fn = lambda g: (np.zeros_like(x),)
    elif kind == "abs":
        out = np.abs(x)
        backward_fn = lambda g: (g * np.sign(x),)
    else:
        raise ValueError(f"unknown unary kind: {kind}")
    return _record(out, (a,), backward_fn)


def relu(a: ArrayLike) -> Tensor:
    return unary(a, "relu")


def sigmoid(a: ArrayLike) -> Tensor:
    return unary(a, "sigmoid")


def exp(a: ArrayLike) -> Tensor:
    return unary(a, "exp")


def log(a: ArrayLike) -> Tensor:
    return unary(a, "log")


def sign(a: ArrayLike) -> Tensor:
    return unary(a, "sign")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {list(a.shape)} x {list(b.shape)} do not align")
    x, y = a.data, b.data
    return _record(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _record(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {list(a.shape)} to {list(shape)}") from exc
    original = a.shape
    return _record(out, (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[list(t.shape) for t in parts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in parts])[:-1]
    return _record(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw]")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c or bias.shape != (f,):
        raise ShapeError(f"conv2d channel mismatch: input {list(x.shape)}, kernel {list(kernel.shape)}, bias {list(bias.shape)}")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(f"conv2d output size is not integral for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}")
    out_h, out_w = span_h // stride + 1, span_w // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    k = kernel.data
    out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out + bias.data[None, :, None, None])

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        grad_bias = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        grad_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])) if kernel.requires_grad else None
        grad_x = None
        if x.requires_grad:
            grad_padded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, k[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                    grad_padded[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += contrib
            grad_x = grad_padded[:, :, padding : padding + h, padding : padding + w]
        return grad_x, grad_kernel, grad_bias

    return _record(out, (x, kernel, bias), backward_fn)


def pool_avg2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("pool_avg2x expects [N,C,H,W]")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool_avg2x needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return _record(out, (x,), lambda g: (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4,))


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest2x expects [N,C,H,W]")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _record(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def _normalize_axes(axis: Union[int, Sequence[int], None], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"invalid axis {ax} for a {ndim}-D tensor")
        normalized.append(ax % ndim)
    if len(set(normalized)) != len(normalized):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(normalized))


def reduce(a: Tensor, kind: str, axis: Union[int, Sequence[int], None] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    x = a.data
    axes = _normalize_axes(axis, x.ndim)
    kept_shape = tuple(1 if i in axes else d for i, d in enumerate(x.shape))

    if kind == "sum":
        out = x.sum(axis=axes, keepdims=keepdims)
        backward_fn = lambda g: (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),)
    elif kind == "mean":
        count = int(np.prod([x.shape[i] for i in axes])) if axes else 1
        out = x.mean(axis=axes, keepdims=keepdims)
        backward_fn = lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).copy(),)
    elif kind == "max":
        keep = [i for i in range(x.ndim) if i not in axes]
        perm = keep + list(axes)
        moved = x.transpose(perm)
        flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
        first = flat.argmax(axis=-1)[..., None]
        values = np.take_along_axis(flat, first, axis=-1)[..., 0]
        route = np.zeros_like(flat)
        np.put_along_axis(route, first, 1, axis=-1)
        route = route.reshape(moved.shape).transpose(np.argsort(perm))
        out = values.reshape(kept_shape) if keepdims else values
        backward_fn = lambda g: (route * g.reshape(kept_shape),)
    else:
        raise ValueError(f"unknown reduce kind: {kind}")
    return _record(np.asarray(out), (a,), backward_fn)


def clip(a: Tensor, lo: ArrayLike, hi: ArrayLike) -> Tensor:
    """Elementwise min(max(a, lo), hi); the bounds are constants of the graph."""
    a = as_tensor(a)
    lo_arr = lo.data if isinstance(lo, Tensor) else np.asarray(lo, dtype=a.data.dtype)
    hi_arr = hi.data if isinstance(hi, Tensor) else np.asarray(hi, dtype=a.data.dtype)
    if np.any(lo_arr > hi_arr):
        raise DomainError("clip lower bound exceeds upper bound")
    x = a.data
    out = np.minimum(np.maximum(x, lo_arr), hi_arr)
    if out.shape != x.shape:
        raise ShapeError(f"clip bounds broadcast {list(x.shape)} to {list(out.shape)}")
    inside = (x > lo_arr) & (x < hi_arr)
    return _record(out, (a,), lambda g: (g * inside,))


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward returns `hard`; backward hands the gradient to `soft` unchanged."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=soft.data.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through shapes differ: {list(hard.shape)} vs {list(soft.shape)}")
    return _record(hard.copy(), (soft,), lambda g: (g,))


def window_min(a: Tensor, radius: int) -> Tensor:
    """Minimum over a (2r+1)x(2r+1) window on the last two axes; out-of-bounds cells are ignored."""
    a = as_tensor(a)
    if radius < 0:
        raise DomainError("window radius must be >= 0")
    if a.ndim < 2:
        raise ShapeError("window_min expects at least 2 axes")
    x = a.data
    h, w = x.shape[-2:]
    side = 2 * radius + 1
    stacked = x.reshape((-1, h, w))
    padded = np.pad(stacked, ((0, 0), (radius, radius), (radius, radius)), constant_values=np.inf)
    windows = sliding_window_view(padded, (side, side), axis=(1, 2))
    flat = windows.reshape(windows.shape[:3] + (side * side,))
    first = flat.argmin(axis=-1)
    out = np.take_along_axis(flat, first[..., None], axis=-1)[..., 0].reshape(x.shape)

    batch = np.arange(stacked.shape[0])[:, None, None]
    rows = np.arange(h)[None, :, None] + first // side
    cols = np.arange(w)[None, None, :] + first % side

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        grad_padded = np.zeros(padded.shape, dtype=g.dtype)
        np.add.at(grad_padded, (batch, rows, cols), g.reshape(stacked.shape))
        return (grad_padded[:, radius : radius + h, radius : radius + w].reshape(x.shape),)

    return _record(np.ascontiguousarray(out), (a,), backward_fn)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf that requires grad."""
    if loss.tape_node is None:
        raise TapeError("backward needs a loss produced under an active tape")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    tape = loss.tape_node.tape
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.tape_node.index + 1]):
        grad_out = pending.pop(id(node.output), None)
        if grad_out is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward_fn(grad_out)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.tape_node is not None and tensor.tape_node.tape is tape:
                key = id(tensor)
                pending[key] = pending[key] + grad if key in pending else grad
            elif tensor.grad is None:
                tensor.grad = np.array(grad, dtype=tensor.data.dtype, copy=True).reshape(tensor.shape)
            else:
                tensor.grad += grad.reshape(tensor.shape)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for tensor in tensors:
        tensor.grad = np.zeros_like(tensor.data) if tensor.requires_grad else None
