"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive appends a node to the thread-local tape when
at least one of its inputs requires a gradient.  ``backward`` replays the tape
in exact reverse order starting at the loss node and then clears it.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "Tape",
    "RunningStats",
    "get_tape",
    "no_grad",
    "is_grad_enabled",
    "row_stable_matmul",
    "tensor",
    "zeros",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "elementwise",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "reduce",
    "concat",
    "batch_norm",
    "log_softmax",
    "sparse_matmul",
    "backward",
]


class Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations (topological by construction)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, inputs, output, backward_fn):
        self.nodes.append(Node(tuple(inputs), output, backward_fn))

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.row_stable = False


_state = _State()


def get_tape() -> Tape:
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def row_stable_matmul():
    """Use a matmul kernel whose output rows do not depend on the other rows.

    BLAS picks different kernels (and summation orders) depending on matrix
    sizes, so stacking extra rows onto an operand can change the last bits of
    the rows that were already there.  Inside this block every product is
    computed in fixed-size row blocks instead.
    """
    prev = _state.row_stable
    _state.row_stable = True
    try:
        yield
    finally:
        _state.row_stable = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

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

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        _state.tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    # np.maximum keeps NaN visible instead of clamping it to zero
    return _make(np.maximum(a.data, 0.0), (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bw)


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"elementwise {op!r} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


_STABLE_BLOCK_ROWS = 256


def _stable_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Every BLAS call sees the same (block x k) @ (k x n) shape, the last
    # block zero-padded, so a row's result cannot depend on its neighbours.
    m, k = a.shape
    out = np.empty((m, b.shape[1]))
    full = m - m % _STABLE_BLOCK_ROWS
    for start in range(0, full, _STABLE_BLOCK_ROWS):
        np.matmul(a[start : start + _STABLE_BLOCK_ROWS], b, out=out[start : start + _STABLE_BLOCK_ROWS])
    if full < m:
        buf = np.zeros((_STABLE_BLOCK_ROWS, k))
        buf[: m - full] = a[full:]
        out[full:] = (buf @ b)[: m - full]
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if _state.row_stable:
        out = _stable_product(a.data, b.data)
    else:
        out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def sparse_matmul(matrix, x) -> Tensor:
    """Multiply a constant scipy sparse matrix by a dense tensor."""
    x = _as_tensor(x)
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise DimensionError(
            f"sparse_matmul: cannot multiply shapes {matrix.shape} and {x.shape}"
        )
    out = np.asarray(matrix @ x.data)

    def bw(g):
        return (np.asarray(matrix.T @ g),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def reduce(op: str, a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (all elements when ``axis`` is None).

    Max sends the whole upstream gradient to the lowest-index maximum.
    """
    a = _as_tensor(a)
    if axis is not None:
        if not -a.ndim <= axis < a.ndim:
            raise DimensionError(f"reduce: axis {axis} out of range for shape {a.shape}")
        axis = axis % a.ndim
        if a.shape[axis] == 0:
            raise DomainError(f"reduce: empty extent along axis {axis}")
    elif a.size == 0:
        raise DomainError("reduce: empty tensor")

    if op == "sum":
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

    elif op == "mean":
        n = a.size if axis is None else a.shape[axis]
        out = a.data.mean(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, a.shape).copy(),)

    elif op == "max":
        if axis is None:
            flat = int(np.argmax(a.data))
            out = a.data.reshape(-1)[flat]
            if keepdims:
                out = out.reshape((1,) * a.ndim)

            def bw(g):
                grad = np.zeros(a.size)
                grad[flat] = np.asarray(g).reshape(-1)[0]
                return (grad.reshape(a.shape),)

        else:
            idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
            out = np.take_along_axis(a.data, idx, axis=axis)
            if not keepdims:
                out = np.squeeze(out, axis=axis)

            def bw(g):
                if not keepdims:
                    g = np.expand_dims(g, axis)
                grad = np.zeros(a.shape)
                np.put_along_axis(grad, idx, g, axis=axis)
                return (grad,)

    else:
        raise ContractError(f"unknown reduction {op!r}")
    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} ({exc})") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(tensors), bw)


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        grad = np.zeros(a.shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(np.array(out, dtype=np.float64), (a,), bw)


# ---------------------------------------------------------------------------
# fused network primitives
# ---------------------------------------------------------------------------


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, width: int, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(width), np.ones(width), momentum, eps)


def batch_norm(x, gamma, beta, stats: RunningStats, mode: str = "train") -> Tensor:
    """Batch normalization over the rows of an N x F tensor.

    In train mode the batch statistics are used and ``stats`` is updated in
    place with the unbiased variance; a single row normalizes to zero, so the
    output is ``beta``.  In eval mode the running statistics are used.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"batch_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    n = x.shape[0]
    if n == 0:
        raise DomainError("batch_norm: empty batch")
    if mode == "train":
        mu = x.data.mean(axis=0)
        centered = x.data - mu
        var = (centered * centered).mean(axis=0)
        m = stats.momentum
        stats.mean = (1.0 - m) * stats.mean + m * mu
        if n > 1:
            stats.var = (1.0 - m) * stats.var + m * var * (n / (n - 1))
    elif mode == "eval":
        centered = x.data - stats.mean
        var = stats.var
    else:
        raise ContractError(f"batch_norm: unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + stats.eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def bw(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if mode == "train":
            dx = (inv_std / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor):
    """Accumulate d(loss)/dt into ``t.grad`` for every requires-grad ancestor.

    The tape is cleared afterwards; a second call needs a fresh forward pass.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = _state.tape
    start = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].output is loss:
            start = i
            break
    seed = np.ones(loss.shape)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    if start is None:
        # a leaf: nothing to propagate
        return
    for node in reversed(tape.nodes[: start + 1]):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
            if inp.grad is None:
                inp.grad = gi.copy()
            else:
                inp.grad = inp.grad + gi
    tape.reset()
