"""A small reverse-mode differentiation engine on top of numpy.

Only the operations the flow model needs are provided. Every value is a
float64 array; a :class:`Tensor` that requires gradients records the
operation that produced it, and :meth:`Tensor.backward` walks the recorded
graph in reverse topological order.

Gradients of leaf tensors accumulate across calls to ``backward`` until
:meth:`Tensor.zero_grad` is called, matching the usual convention.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError, DomainError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float64 array that may participate in a recorded graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
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
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- reverse pass -----------------------------------------------------
    def backward(self, grad=None) -> None:
        """Populate ``grad`` on every reachable leaf that requires gradients."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires gradients")

        order = topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``; every node appears after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc


# -- binary elementwise -----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


# -- unary elementwise ------------------------------------------------------
def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(x) -> Tensor:
    """``log(sigmoid(x))`` computed without overflow for large ``|x|``."""
    x = as_tensor(x)
    out = -np.logaddexp(0.0, -x.data)
    return _result(out, (x,), lambda g: (g * _sigmoid(-x.data),), "log_sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0.0
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * positive,), "relu")


def tabs(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: add, sub, mul, div, exp, log, sigmoid, relu, abs, square."""
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div, "exp": exp, "log": log,
        "sigmoid": sigmoid, "relu": relu, "abs": tabs, "square": square,
    }
    if op not in table:
        raise ContractError(f"unknown elementwise op {op!r}")
    return table[op](*operands)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- reductions and shape ops -----------------------------------------------
def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (x,), backward, "sum")


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index], dtype=np.float64), (x,), backward, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions are treated as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def conv2d(x, kernels, bias) -> Tensor:
    """3x3 cross-correlation with zero padding 1, so spatial size is kept.

    ``x`` is ``(C_in, H, W)`` or batched ``(B, C_in, H, W)``; ``kernels`` is
    ``(C_out, C_in, 3, 3)`` and ``bias`` is ``(C_out,)``.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d expects (C,H,W) or (B,C,H,W), got {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects 3x3 kernels, got {kernels.shape}")
    c_out, c_in = kernels.shape[:2]
    if xd.shape[1] != c_in:
        raise DimensionError(f"conv2d: input has {xd.shape[1]} channels, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    batch, _, height, width = xd.shape
    padded = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    # (B, H, W, C_in * 9)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch, height, width, c_in * 9)
    kmat = kernels.data.reshape(c_out, c_in * 9)
    out = cols @ kmat.T + bias.data
    out = out.transpose(0, 3, 1, 2)
    if unbatched:
        out = out[0]

    def backward(g):
        gb = g[None] if unbatched else g
        g_last = gb.transpose(0, 2, 3, 1)  # (B, H, W, C_out)
        g_kernels = np.tensordot(g_last, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(kernels.shape)
        g_bias = g_last.sum(axis=(0, 1, 2))
        g_cols = (g_last @ kmat).reshape(batch, height, width, c_in, 3, 3)
        g_padded = np.zeros_like(padded)
        for di in range(3):
            for dj in range(3):
                g_padded[:, :, di:di + height, dj:dj + width] += g_cols[..., di, dj].transpose(0, 3, 1, 2)
        g_x = g_padded[:, :, 1:-1, 1:-1]
        if unbatched:
            g_x = g_x[0]
        return g_x, g_kernels, g_bias

    return _result(np.ascontiguousarray(out), (x, kernels, bias), backward, "conv2d")


def batch_norm(x, gamma, beta, eps: float = 1e-5, channel_axis: int = 1,
               training: bool = True, running_mean=None, running_var=None) -> Tensor:
    """Per-channel normalization.

    Statistics are taken over every axis except ``channel_axis``. In training
    mode the batch statistics are used (and differentiated through); otherwise
    ``running_mean``/``running_var`` are treated as constants.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ContractError("batch_norm eps must be positive")
    channel_axis = channel_axis % x.ndim
    if x.shape[0] == 0:
        raise ContractError("batch_norm received an empty batch")
    channels = x.shape[channel_axis]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError("batch_norm: gamma/beta must have one entry per channel")
    axes = tuple(a for a in range(x.ndim) if a != channel_axis)
    bshape = [1] * x.ndim
    bshape[channel_axis] = channels

    if training:
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
    else:
        if running_mean is None or running_var is None:
            raise ContractError("inference-mode batch_norm needs running statistics")
        mean = np.asarray(running_mean, dtype=np.float64).reshape(bshape)
        var = np.asarray(running_var, dtype=np.float64).reshape(bshape)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    g_r = gamma.data.reshape(bshape)
    out = x_hat * g_r + beta.data.reshape(bshape)
    count = x.data.size // channels

    def backward(g):
        g_gamma = (g * x_hat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_xhat = g * g_r
        if training:
            g_x = inv_std / count * (
                count * g_xhat
                - g_xhat.sum(axis=axes, keepdims=True)
                - x_hat * (g_xhat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            g_x = g_xhat * inv_std
        return g_x, g_gamma, g_beta

    return _result(out, (x, gamma, beta), backward, "batch_norm")


def surrogate(y, a: float, b: float, delta: float) -> Tensor:
    """Elementwise interval surrogate penalty (see :mod:`cdrflow.constraints`)."""
    from .constraints import surrogate_h, surrogate_h_grad

    y = as_tensor(y)
    out = surrogate_h(y.data, a, b, delta)
    return _result(np.asarray(out, dtype=np.float64), (y,),
                   lambda g: (g * surrogate_h_grad(y.data, a, b, delta),), "surrogate")


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. every entry of ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad
