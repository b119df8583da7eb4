"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new Tensor. When at least one input is part of a graph
(a parameter, or something computed from one) and recording is enabled,
the result keeps references to its parents plus a closure that pushes its
own gradient back into theirs. `backward` walks that graph in reverse
topological order.
"""
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from sparsereg.core.exceptions import DimensionError, UsageError

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_grad():
    previous = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: tuple = (),
        _backward: Optional[Callable[[], None]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @classmethod
    def parameter(cls, data, name: Optional[str] = None) -> "Tensor":
        return cls(np.array(data, dtype=np.float64), requires_grad=True, name=name)

    @property
    def shape(self) -> list[int]:
        return list(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def backward(self) -> None:
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that is not attached to a graph")
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        self.grad += 1.0
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division is only defined by constants")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_factory) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked or not is_recording():
        return Tensor(data)
    out = Tensor(data, requires_grad=True, _parents=tuple(parents))
    out._backward = backward_factory(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def factory(out):
        def backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.data.shape)
        return backward

    return _result(a.data + b.data, (a, b), factory)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def factory(out):
        def backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.data.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(out.grad, b.data.shape)
        return backward

    return _result(a.data - b.data, (a, b), factory)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def factory(out):
        def backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad * a.data, b.data.shape)
        return backward

    return _result(a.data * b.data, (a, b), factory)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def factory(out):
        def backward():
            if a.requires_grad:
                a.grad += out.grad @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ out.grad
        return backward

    return _result(a.data @ b.data, (a, b), factory)


def transpose(a: Tensor) -> Tensor:
    def factory(out):
        def backward():
            a.grad += out.grad.T
        return backward

    return _result(a.data.T.copy(), (a,), factory)


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0

    def factory(out):
        def backward():
            a.grad += out.grad * positive
        return backward

    return _result(np.where(positive, a.data, 0.0), (a,), factory)


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)

    def factory(out):
        def backward():
            a.grad += out.grad * (1.0 - value * value)
        return backward

    return _result(value, (a,), factory)


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)

    def factory(out):
        def backward():
            a.grad += out.grad * value
        return backward

    return _result(value, (a,), factory)


def absolute(a: Tensor) -> Tensor:
    # np.sign(0) == 0, so the subgradient at zero is 0
    sign = np.sign(a.data)

    def factory(out):
        def backward():
            a.grad += out.grad * sign
        return backward

    return _result(np.abs(a.data), (a,), factory)


def square(a: Tensor) -> Tensor:
    def factory(out):
        def backward():
            a.grad += out.grad * 2.0 * a.data
        return backward

    return _result(a.data * a.data, (a,), factory)


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    def factory(out):
        def backward():
            grad = out.grad if axis is None else np.expand_dims(out.grad, axis)
            a.grad += np.broadcast_to(grad, a.data.shape)
        return backward

    return _result(np.sum(a.data, axis=axis), (a,), factory)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis), 1.0 / count)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"minimum needs equal shapes, got {a.shape} and {b.shape}")
    take_a = a.data <= b.data

    def factory(out):
        def backward():
            if a.requires_grad:
                a.grad += out.grad * take_a
            if b.requires_grad:
                b.grad += out.grad * ~take_a
        return backward

    return _result(np.where(take_a, a.data, b.data), (a, b), factory)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data >= low) & (a.data <= high)

    def factory(out):
        def backward():
            a.grad += out.grad * inside
        return backward

    return _result(np.clip(a.data, low, high), (a,), factory)


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def factory(out):
        def backward():
            for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
                if t.requires_grad:
                    index = [slice(None)] * out.grad.ndim
                    index[axis] = slice(start, stop)
                    t.grad += out.grad[tuple(index)]
        return backward

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, factory)


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise each row to zero mean and unit variance (no affine terms)."""
    centered = a.data - a.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std

    def factory(out):
        def backward():
            g = out.grad
            g_mean = g.mean(axis=-1, keepdims=True)
            gx_mean = (g * normalized).mean(axis=-1, keepdims=True)
            a.grad += inv_std * (g - g_mean - normalized * gx_mean)
        return backward

    return _result(normalized, (a,), factory)


def spectral_scaled(weight: Tensor, u: np.ndarray, v: np.ndarray, floor: float = 1e-12) -> Tensor:
    """W / sigma with sigma = u^T W v, the singular vectors held constant."""
    sigma = float(u @ weight.data @ v)
    scale = max(sigma, floor)

    def factory(out):
        def backward():
            g = out.grad
            weight.grad += g / scale
            if sigma > floor:
                weight.grad -= (np.sum(g * weight.data) / (scale * scale)) * np.outer(u, v)
        return backward

    return _result(weight.data / scale, (weight,), factory)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
