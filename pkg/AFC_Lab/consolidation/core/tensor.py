"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

- Tensor: immutable array wrapper; intermediates carry a handle into the tape
- Tape: ordered record of primitive applications (context manager, thread-local)
- Function: primitive with forward/backward; subclasses are the op set
- backward(): one reverse sweep over a tape, gradients for any handles

A tensor is recorded only while a tape is active and at least one input
requires a gradient. Frozen models therefore produce detached constants
without any extra bookkeeping.
"""

from __future__ import annotations

import logging
import os
import threading
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

# -----------------------------------------------------------------------------
# Debug switch
# -----------------------------------------------------------------------------
_DEBUG = os.environ.get("AFC_DEBUG", "").strip() not in ("", "0")


def set_debug(enabled: bool) -> None:
    """Toggle NaN/Inf checks on every primitive output and gradient."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")


# -----------------------------------------------------------------------------
# Tape
# -----------------------------------------------------------------------------
_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered list of recorded primitives; parents always precede children."""

    def __init__(self) -> None:
        self.nodes: List[Tuple["Function", "Tensor"]] = []
        self.backward_passes = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, fn: "Function", out: "Tensor") -> None:
        out._tape = self
        out.node_id = len(self.nodes)
        self.nodes.append((fn, out))


# -----------------------------------------------------------------------------
# Tensor
# -----------------------------------------------------------------------------
class Tensor:
    """Row-major float64 array, optionally tracked on the active tape."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self.node_id: Optional[int] = None

    # ---------- introspection ----------
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ---------- operators ----------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    # ---------- method shortcuts ----------
    def sum(self, axis: Union[int, Tuple[int, ...], None] = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Union[int, Tuple[int, ...], None] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad=False)


def parameter(data: ArrayLike) -> Tensor:
    """Leaf tensor that takes part in differentiation."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# -----------------------------------------------------------------------------
# Function base
# -----------------------------------------------------------------------------
class Function:
    """A primitive: forward on arrays, backward returns one gradient per input."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs: Any) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(*tensors)
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        _check_finite(out_data, cls.__name__)
        tape = active_tape()
        tracked = tape is not None and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=tracked)
        if tracked:
            tape.record(fn, out)
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out axes that broadcasting expanded."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


# ---------- element-wise binary ----------
class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b, "add")
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return self.unbroadcast(grad, a.shape), self.unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b, "sub")
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return self.unbroadcast(grad, a.shape), self.unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b, "mul")
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return (self.unbroadcast(grad * b.data, a.shape),
                self.unbroadcast(grad * a.data, b.shape))


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b, "div")
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        ga = grad / b.data
        gb = -grad * a.data / (b.data * b.data)
        return self.unbroadcast(ga, a.shape), self.unbroadcast(gb, b.shape)


# ---------- element-wise unary ----------
class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Scale(Function):
    def forward(self, a, factor: float = 1.0):
        self.factor = float(factor)
        return a * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Softplus(Function):
    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        return (grad * expit(self.inputs[0].data),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, grad):
        return (grad / self.inputs[0].data,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad / (2.0 * self.out),)


# ---------- reductions ----------
def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        shape = self.inputs[0].shape
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axes])) if self.axes else 1
        return np.mean(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        shape = self.inputs[0].shape
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad / self.count, shape).copy(),)


class FrobeniusNorm(Function):
    """sqrt of the sum of squares over `axis`; zero blocks get zero gradient."""

    def forward(self, a, axis=None, keepdims: bool = False):
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.norm = np.sqrt(np.sum(a * a, axis=self.axes, keepdims=True))
        return self.norm if keepdims else np.squeeze(self.norm, axis=self.axes)

    def backward(self, grad):
        a = self.inputs[0].data
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        safe = np.where(self.norm > 0, self.norm, 1.0)
        local = np.where(self.norm > 0, a / safe, 0.0)
        return (grad * local,)


class Softmax(Function):
    def forward(self, a, axis: int = -1):
        self.axis = axis
        shifted = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        inner = np.sum(grad * y, axis=self.axis, keepdims=True)
        return (y * (grad - inner),)


# ---------- shape ----------
class Reshape(Function):
    def forward(self, a, shape=()):
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from e

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class TakeRows(Function):
    """Gather along axis 0; repeated indices accumulate on the way back."""

    def forward(self, a, index=None):
        self.index = np.asarray(index, dtype=np.int64)
        return a[self.index]

    def backward(self, grad):
        out = np.zeros_like(self.inputs[0].data)
        np.add.at(out, self.index, grad)
        return (out,)


# ---------- linear algebra ----------
class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, grad):
        a, b = self.inputs
        return grad @ b.data.T, a.data.T @ grad


class Conv2d(Function):
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw], zero padding."""

    def forward(self, x, w, stride: int = 1, padding: int = 0):
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
        self.stride = int(stride)
        self.padding = int(padding)
        kh, kw = w.shape[2], w.shape[3]
        xp = np.pad(x, ((0, 0), (0, 0), (self.padding,) * 2, (self.padding,) * 2))
        if xp.shape[2] < kh or xp.shape[3] < kw:
            raise DimensionError(f"conv2d kernel {w.shape[2:]} larger than padded input {xp.shape[2:]}")
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        self.windows = windows[:, :, ::self.stride, ::self.stride]
        out = np.tensordot(self.windows, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        x, w = self.inputs
        kh, kw = w.shape[2], w.shape[3]
        p, s = self.padding, self.stride
        gw = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))

        # full correlation of the (dilated) output gradient with the flipped kernel
        hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
        dil = np.zeros((grad.shape[0], grad.shape[1], hp - kh + 1, wp - kw + 1))
        dil[:, :, ::s, ::s] = grad
        gpad = np.pad(dil, ((0, 0), (0, 0), (kh - 1,) * 2, (kw - 1,) * 2))
        gwin = sliding_window_view(gpad, (kh, kw), axis=(2, 3))
        flipped = w.data[:, :, ::-1, ::-1]
        gxp = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]]
        return np.ascontiguousarray(gx), gw


class AvgPool(Function):
    """Non-overlapping k x k average pooling; k must divide H and W."""

    def forward(self, x, kernel: int = 2):
        if x.ndim != 4:
            raise DimensionError(f"avg_pool expects rank-4 input, got {x.shape}")
        k = int(kernel)
        b, c, h, w = x.shape
        if h % k or w % k:
            raise DimensionError(f"avg_pool kernel {k} does not divide spatial dims {(h, w)}")
        self.k = k
        return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, grad):
        k = self.k
        up = np.repeat(np.repeat(grad, k, axis=2), k, axis=3)
        return (up / float(k * k),)


# -----------------------------------------------------------------------------
# Functional surface
# -----------------------------------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Add.apply(a, b)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Sub.apply(a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Mul.apply(a, b)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Div.apply(a, b)


def neg(a: ArrayLike) -> Tensor:
    return Neg.apply(a)


def scale(a: ArrayLike, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def relu(a: ArrayLike) -> Tensor:
    return Relu.apply(a)


def softplus(a: ArrayLike) -> Tensor:
    return Softplus.apply(a)


def exp(a: ArrayLike) -> Tensor:
    return Exp.apply(a)


def log(a: ArrayLike) -> Tensor:
    return Log.apply(a)


def sqrt(a: ArrayLike) -> Tensor:
    return Sqrt.apply(a)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def flatten(a: ArrayLike) -> Tensor:
    """Collapse everything after the batch axis."""
    t = as_tensor(a)
    return reshape(t, (t.shape[0], -1))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def take_rows(a: ArrayLike, index: Sequence[int]) -> Tensor:
    return TakeRows.apply(a, index=index)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(a, b)


def conv2d(x: ArrayLike, w: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, w, stride=stride, padding=padding)


def avg_pool(x: ArrayLike, kernel: int = 2) -> Tensor:
    return AvgPool.apply(x, kernel=kernel)


def frobenius_norm(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return FrobeniusNorm.apply(a, axis=axis, keepdims=keepdims)


def frobenius_inner(a: ArrayLike, b: ArrayLike) -> Tensor:
    """tr(a^T b) for two rank-2 tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"frobenius_inner expects rank-2 tensors, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise DimensionError(f"frobenius_inner shape mismatch: {a.shape} vs {b.shape}")
    return tsum(mul(a, b))


# -----------------------------------------------------------------------------
# Reverse sweep
# -----------------------------------------------------------------------------
def backward(loss: Tensor, wrt: Iterable[Tensor]) -> Dict[Tensor, np.ndarray]:
    """
    Gradients of a scalar `loss` with respect to each handle in `wrt`.

    Handles the loss does not depend on receive zeros. Handles that were
    never tracked (constants) also receive zeros, with a warning. The result
    is also written to each handle's ``grad`` slot.
    """
    wrt = list(wrt)
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    wanted = {id(t) for t in wrt}
    grads: Dict[int, np.ndarray] = {}
    tape = loss._tape
    if tape is not None and loss.node_id is not None:
        tape.backward_passes += 1
        grads[id(loss)] = np.ones_like(loss.data)
        for fn, out in reversed(tape.nodes[: loss.node_id + 1]):
            g = grads.get(id(out))
            if g is None:
                continue
            if id(out) not in wanted:
                del grads[id(out)]
            for inp, gi in zip(fn.inputs, fn.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                _check_finite(gi, f"{type(fn).__name__}.backward")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

    result: Dict[Tensor, np.ndarray] = {}
    for t in wrt:
        if not t.requires_grad:
            logger.warning("backward: %r is detached from any tape; returning zeros", t)
        g = grads.get(id(t))
        g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g
        result[t] = g
    return result


__all__ = [
    "Tensor", "Tape", "Function", "active_tape", "as_tensor", "parameter",
    "set_debug", "debug_enabled", "backward",
    "add", "sub", "mul", "div", "neg", "scale", "relu", "softplus", "exp", "log",
    "sqrt", "tsum", "mean", "softmax", "reshape", "flatten", "transpose",
    "take_rows", "matmul", "conv2d", "avg_pool", "frobenius_norm", "frobenius_inner",
]
