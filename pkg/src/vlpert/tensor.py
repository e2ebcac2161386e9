"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a contiguous float64 ndarray. Operations record a node
(parent tensors plus a backward closure) only while gradients are enabled
and some input requires them; `backward` walks the graph once in reverse
topological order and then frees it, so a graph is built per forward pass
and never reused. Tensors are immutable after creation except for their
grad buffers.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import backend

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that turns off graph recording on this thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus an optional reverse-mode gradient node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar; scalars are lifted to constant tensors ------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division is supported by scalars only")
        return mul(self, _lift(1.0 / other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- arithmetic ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors, or batched product of two 3-D ones."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ValueError(f"matmul expects two 2-D or two 3-D tensors, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ValueError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.swapaxes(-1, -2))
        _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _node(out_data, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        _accumulate(a, g / (1.0 + np.exp(-a.data)))

    return _node(out_data, (a,), backward)


# -- shape manipulation ----------------------------------------------------


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old_shape = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old_shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _node(np.transpose(a.data, axes).copy(), (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack of no tensors")
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        slices = np.moveaxis(g, axis, 0)
        for t, piece in zip(tensors, slices):
            _accumulate(t, piece)

    return _node(out_data, tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of no tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + n)
            _accumulate(t, g[tuple(index)])
            offset += n

    return _node(out_data, tensors, backward)


def take_row(a: Tensor, index: int) -> Tensor:
    """Row `index` of a 2-D tensor as a 1-D tensor."""
    if a.data.ndim != 2:
        raise ValueError("take_row expects a 2-D tensor")

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accumulate(a, full)

    return _node(a.data[index].copy(), (a,), backward)


# -- reductions with stable exponentials ------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    """Softmax along `axis`, computed with max-subtraction."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise ValueError("non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - inner))

    return _node(out_data, (x,), backward)


def logsumexp(x: Tensor, axis=None, keepdims=False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    sums = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out_keep = np.log(sums) + m
    if keepdims:
        out_data = out_keep
    elif axis is None:
        out_data = out_keep.reshape(())
    else:
        out_data = out_keep.squeeze(axis=axis)
    soft = np.exp(x.data - out_keep)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, soft * g)

    return _node(out_data, (x,), backward)


def l2_normalize(v: Tensor, axis: int) -> Tensor:
    """Scale slices along `axis` to unit L2 norm."""
    norms = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if (norms <= 1e-12).any():
        raise ValueError("zero-norm vector")
    out_data = v.data / norms

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(v, (g - out_data * inner) / norms)

    return _node(out_data, (v,), backward)


# -- convolution (backend kernels) ------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of NHWC input with (kh, kw, c_in, c_out) weights."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects a 4-D input and 4-D weights")
    if x.data.shape[3] != w.data.shape[2]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.data.shape[3]}, weights expect {w.data.shape[2]}"
        )
    if b.data.shape != (w.data.shape[3],):
        raise ValueError("conv2d bias shape must be (c_out,)")
    _, h, wid, _ = x.data.shape
    kh, kw = w.data.shape[:2]
    out_data = backend.conv2d_forward(x.data, w.data, b.data, stride, padding)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accumulate(x, backend.conv2d_grad_input(g, w.data, stride, padding, h, wid))
        if w.requires_grad or b.requires_grad:
            gw, gb = backend.conv2d_grad_weights(x.data, g, stride, padding, kh, kw)
            _accumulate(w, gw)
            _accumulate(b, gb)

    return _node(out_data, (x, w, b), backward)


# -- backward pass ----------------------------------------------------------


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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad leaf reachable from `loss`.

    The loss must be a scalar produced by at least one recorded operation.
    Gradients reaching a tensor through several paths add up. The graph is
    freed afterwards, so a second backward needs a fresh forward pass.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss._backward is None:
        raise ValueError("backward on a tensor detached from any graph")
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:  # interior node: free graph + buffer
            node._parents = ()
            node._backward = None
            node.grad = None
    loss.grad = None


# -- finite differences ------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar `f` at `x`, one coordinate at a time."""
    if not 0.0 < h <= 1e-2:
        raise ValueError("step size h must lie in (0, 1e-2]")

    def evaluate(arr: np.ndarray) -> float:
        value = f(Tensor(arr))
        value = value.item() if isinstance(value, Tensor) else float(value)
        if not np.isfinite(value):
            raise ValueError("non-finite function value in finite differences")
        return value

    flat = x.data.reshape(-1)
    grad = np.empty_like(flat)
    for k in range(flat.size):
        bumped = flat.copy()
        bumped[k] = flat[k] + h
        up = evaluate(bumped.reshape(x.data.shape))
        bumped[k] = flat[k] - h
        down = evaluate(bumped.reshape(x.data.shape))
        grad[k] = (up - down) / (2.0 * h)
    return Tensor(grad.reshape(x.data.shape))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D tensors as a scalar tensor."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError("dot expects two 1-D tensors of equal length")
    return tsum(mul(a, b))
