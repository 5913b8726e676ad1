"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass with a numpy
``forward`` and a ``backward`` that maps the output gradient to one gradient
per input.  Calling ``Function.apply`` records a node on the tape only when
some input requires a gradient and recording is enabled (see :func:`no_grad`).

Forward results are checked for finiteness; overflow raises
:class:`~emorag.errors.NumericError` instead of propagating Inf/NaN.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Sequence

import numpy as np

from emorag.errors import NumericError, ShapeError, UsageError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, finite differences)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(value) -> np.ndarray:
    if isinstance(value, DiffTensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


class DiffTensor:
    """A float64 array that may participate in a reverse-mode computation graph.

    Leaves created with ``requires_grad=True`` own a ``grad`` buffer of the same
    shape.  Gradients accumulate across :func:`backward` calls until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_ctx", "_freed", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(dim <= 0 for dim in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[DiffTensor, ...] = ()
        self._ctx: Function | None = None
        self._freed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, ctx) -> "DiffTensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = ctx is not None
        out.grad = None
        out._parents = tuple(parents)
        out._ctx = ctx
        out._freed = False
        return out

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffTensor(shape={self.shape}{flag})"

    # --- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(data, requires_grad=requires_grad)


def _lift(value) -> DiffTensor:
    if isinstance(value, DiffTensor):
        return value
    arr = np.asarray(value, dtype=np.float64)
    out = DiffTensor.__new__(DiffTensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._ctx = None
    out._freed = False
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """One differentiable primitive; subclasses define ``forward`` and ``backward``."""

    needs_input_grad: tuple[bool, ...] = ()

    @classmethod
    def apply(cls, *inputs, **kwargs) -> DiffTensor:
        tensors = [_lift(x) for x in inputs]
        ctx = cls()
        ctx.needs_input_grad = tuple(t.requires_grad for t in tensors)
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            try:
                out = ctx.forward(*[t.data for t in tensors], **kwargs)
            except FloatingPointError as exc:
                raise NumericError(f"{cls.__name__}: {exc}") from None
        out = np.asarray(out, dtype=np.float64)
        if not np.isfinite(out).all():
            raise NumericError(f"{cls.__name__} produced non-finite values")
        if _grad_enabled() and any(ctx.needs_input_grad):
            return DiffTensor._from_op(out, tensors, ctx)
        return DiffTensor._from_op(out, (), None)

    def forward(self, *arrays, **kwargs) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:  # pragma: no cover
        raise NotImplementedError


# --- elementwise arithmetic ----------------------------------------------


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Power(Function):
    def forward(self, a, exponent: float):
        self.a, self.exponent = a, float(exponent)
        return a**self.exponent

    def backward(self, g):
        return (g * self.exponent * self.a ** (self.exponent - 1.0),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return (g * (1.0 - self.out * self.out),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return a * self.mask

    def backward(self, g):
        return (g * self.mask,)


# --- reductions and shape ops --------------------------------------------


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape=()):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(self, g):
        return (g.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.axes)),)


class Concat(Function):
    def forward(self, *arrays, axis=-1):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            shapes = ", ".join(str(a.shape) for a in arrays)
            raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from None

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


# --- linear algebra ------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        try:
            return np.matmul(a, b)
        except ValueError:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def backward(self, g):
        ga = np.matmul(g, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), g)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


# --- functional surface --------------------------------------------------


def add(a, b) -> DiffTensor:
    return Add.apply(a, b)


def sub(a, b) -> DiffTensor:
    return Sub.apply(a, b)


def mul(a, b) -> DiffTensor:
    return Mul.apply(a, b)


def div(a, b) -> DiffTensor:
    return Div.apply(a, b)


def power(a, exponent: float) -> DiffTensor:
    return Power.apply(a, exponent=exponent)


def tanh(a) -> DiffTensor:
    return Tanh.apply(a)


def exp(a) -> DiffTensor:
    return Exp.apply(a)


def relu(a) -> DiffTensor:
    return Relu.apply(a)


def tsum(a, axis=None, keepdims: bool = False) -> DiffTensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> DiffTensor:
    arr = _as_array(a)
    if axis is None:
        count = arr.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([arr.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> DiffTensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None) -> DiffTensor:
    return Transpose.apply(a, axes=axes)


def concat(tensors: Iterable, axis: int = -1) -> DiffTensor:
    return Concat.apply(*tensors, axis=axis)


def matmul(a, b) -> DiffTensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    return MatMul.apply(a, b)


def softmax(x, axis: int = -1) -> DiffTensor:
    return Softmax.apply(x, axis=axis)


def softmax_rows(x) -> DiffTensor:
    """Row-wise softmax of a 2-D tensor, stabilized by per-row max subtraction."""
    if _as_array(x).ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got shape {_as_array(x).shape}")
    return Softmax.apply(x, axis=-1)


# --- reverse pass --------------------------------------------------------


def _topological_order(root: DiffTensor) -> list[DiffTensor]:
    order: list[DiffTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: DiffTensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing buffers.  The tape below ``loss`` is
    released afterwards, so a second call on the same loss is an error.
    """
    if not isinstance(loss, DiffTensor):
        raise UsageError("backward() needs a DiffTensor")
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise UsageError("the tape for this tensor was already consumed by backward()")
    if loss._ctx is None and not loss.requires_grad:
        raise UsageError("tensor is not on the computation tape")

    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            if node.requires_grad:
                node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        parent_grads = node._ctx.backward(g)
        for parent, needs, pg in zip(node._parents, node._ctx.needs_input_grad, parent_grads):
            if not needs or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    for node in order:
        if node._ctx is not None:
            node._ctx = None
            node._parents = ()
            node._freed = True
