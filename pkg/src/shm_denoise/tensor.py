"""Small reverse-mode autodiff engine on top of numpy.

Tensors wrap a float64 ``numpy.ndarray``.  Every operation on tensors that
require gradients records a node holding its parents and a backward rule;
:func:`backward` walks the recorded graph in reverse topological order.
The graph is define-by-run and single-use: once a loss has been
back-propagated, its recording cannot be back-propagated again.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of a recorded graph (non-scalar loss, repeated backward)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # ------------------------------------------------------------------ info
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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ----------------------------------------------------- grad accumulation
    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def _acc_at(self, index, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        if _needs_add_at(index):
            np.add.at(self.grad, index, g)
        else:
            self.grad[index] += g

    # ------------------------------------------------------------ operators
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def _needs_add_at(index) -> bool:
    # fancy (integer-array) indices may repeat positions; basic slices never do
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._acc(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._acc(unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._acc(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._acc(unbroadcast(-g, b.shape))

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._acc(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._acc(unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._acc(unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._acc(unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: a._acc(-g))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: a._acc(2.0 * a.data * g))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: a._acc(g * (1.0 - y * y)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, "sigmoid", (a,), lambda g: a._acc(g * y * (1.0 - y)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: a._acc(g * mask))


def identity(a) -> Tensor:
    return as_tensor(a)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: a._acc(g * y))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("softmax: scalar input has no axis")
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._acc(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, "softmax", (a,), backward)


# --------------------------------------------------------------- reductions
def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean: empty tensor")
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g / count, a.shape))

    return _make(np.asarray(out), "mean", (a,), backward)


# ----------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0]:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._acc(unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch dims instead of materialising per-batch products
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            b._acc(gb)

    return _make(out, "matmul", (a, b), backward)


def conv1d(x, kernel, bias=None) -> Tensor:
    """Valid 1-D cross-correlation over time.

    ``x`` is (..., L, C_in), ``kernel`` is (F, C_in, K), ``bias`` is (F,).
    Returns (..., L - K + 1, F).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3 or x.ndim < 2 or x.shape[-1] != kernel.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {kernel.shape}")
    F, C, K = kernel.shape
    L = x.shape[-2]
    if L < K:
        raise ShapeError(f"conv1d: input length {L} shorter than kernel {K} (shapes {x.shape}, {kernel.shape})")
    # patches: (..., L-K+1, C, K)
    patches = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=-2)
    out = np.tensordot(patches, kernel.data, axes=([-2, -1], [1, 2]))
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (F,):
            raise ShapeError(f"conv1d: bias shape {bias.shape} does not match {F} filters")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        # g: (..., L-K+1, F)
        if kernel.requires_grad:
            gk = np.tensordot(g, patches, axes=(list(range(g.ndim - 1)), list(range(g.ndim - 1))))
            kernel._acc(gk)
        if bias is not None and bias.requires_grad:
            bias._acc(g.reshape(-1, F).sum(axis=0))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            # contribution of tap k lands on rows k .. k + L-K
            for k in range(K):
                gx[..., k : k + L - K + 1, :] += g @ kernel.data[:, :, k]
            x._acc(gx)

    return _make(out, "conv1d", parents, backward)


# ----------------------------------------------------------------- shaping
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, "reshape", (a,), lambda g: a._acc(g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, "transpose", (a,), lambda g: a._acc(np.transpose(g, inv)))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _make(np.array(out), "broadcast_to", (a,), lambda g: a._acc(unbroadcast(g, a.shape)))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    return _make(np.array(out), "getitem", (a,), lambda g: a._acc_at(index, g))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no tensors")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._acc(np.take(g, np.arange(lo, hi), axis=axis))

    return _make(out, "concat", tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: no tensors")
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._acc(p)

    return _make(out, "stack", tensors, backward)


def unstack(a, axis: int = 0) -> list[Tensor]:
    """Split ``a`` along ``axis`` into views, one tensor per index."""
    a = as_tensor(a)
    axis = axis % a.ndim
    lead = (slice(None),) * axis
    return [getitem(a, lead + (i,)) for i in range(a.shape[axis])]


# ---------------------------------------------------------------- backward
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor in ``loss``'s graph.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    if loss._consumed:
        raise GraphError("this graph has already been back-propagated")
    order = _topo_order(loss)
    for node in order:
        if not node.is_leaf:
            if node._consumed:
                raise GraphError("graph shares nodes with an already back-propagated recording")
            node.grad = None
    loss._acc(np.ones_like(loss.data))
    for node in reversed(order):
        if node.is_leaf:
            continue
        if node.grad is not None:
            node._backward(node.grad)
        node._consumed = True


# -------------------------------------------------------------- grad check
@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray

    def __bool__(self) -> bool:
        return self.passed


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if g_ad.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, step: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Compare autodiff gradient of scalar ``f`` at ``x`` with central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(as_tensor(x).data, dtype=DTYPE, copy=True)
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise GraphError(f"grad_check needs a scalar function, got shape {y.shape}")
    backward(y)
    g_ad = xt.grad if xt.grad is not None else np.zeros_like(x0)

    g_fd = np.zeros_like(x0)
    flat = g_fd.reshape(-1)
    probe = x0.copy()
    pflat = probe.reshape(-1)
    for i in range(pflat.size):
        orig = pflat[i]
        pflat[i] = orig + step
        fp = f(Tensor(probe)).item()
        pflat[i] = orig - step
        fm = f(Tensor(probe)).item()
        pflat[i] = orig
        flat[i] = (fp - fm) / (2 * step)
    err = relative_error(g_ad, g_fd)
    return GradCheckReport(err, tolerance, err < tolerance, g_ad, g_fd)
