"""Dense float64 tensors with reverse-mode differentiation.

The engine is deliberately small: every op records its parents and a closure
that maps the upstream gradient to one gradient per parent.  ``backward``
walks the recorded graph in reverse topological order and then frees it, so a
graph can be differentiated exactly once.

Storage is a numpy ``float64`` array (row-major), which gives the flat data
layout plus shape that the rest of the package relies on.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the reflected Tensor method

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._freed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return _leaf(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._freed

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise ContractError("graph already consumed by a previous backward(); re-run forward")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tensor with requires_grad=True")

        order = topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._freed = True

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class ComputeGraph:
    """Snapshot of the recorded operations feeding ``output``, in topological order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = topological_order(output)

    def __len__(self) -> int:
        return len(self.nodes)


def topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._freed:
            raise ContractError("graph contains nodes freed by an earlier backward(); re-run forward")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- construction helpers -------------------------------------------------
def _leaf(data) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(data, dtype=np.float64)
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    t._op = "leaf"
    t._freed = False
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else _leaf(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = _leaf(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(out, (a,), backward, "gelu")


# -- linear algebra and shape ops -----------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, ts, backward, "concat")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def split(a, sections, axis: int = 0) -> list:
    """Split into equal ``sections`` (int) or at the given indices (list)."""
    a = as_tensor(a)
    n = a.shape[axis]
    if isinstance(sections, int):
        if sections <= 0 or n % sections:
            raise DimensionError(f"split: axis of size {n} not divisible into {sections}")
        step = n // sections
        bounds = [(i * step, (i + 1) * step) for i in range(sections)]
    else:
        edges = [0, *sections, n]
        bounds = list(zip(edges[:-1], edges[1:]))
    pieces = []
    for lo, hi in bounds:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(lo, hi)
        pieces.append(getitem(a, tuple(idx)))
    return pieces


# -- reductions -----------------------------------------------------------
def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.asarray(out).size, 1)
    return _make(np.asarray(out), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims) / count,), "mean")


def l1_norm(a, axis=None, keepdims=False) -> Tensor:
    return tsum(tabs(a), axis=axis, keepdims=keepdims)


def l2_norm(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=keepdims))

    def backward(g):
        denom = _expand(out, a.shape, axis, keepdims)
        safe = np.where(denom > 0, denom, 1.0)
        return (np.where(denom > 0, _expand(g, a.shape, axis, keepdims) * a.data / safe, 0.0),)

    return _make(np.asarray(out), (a,), backward, "l2_norm")


def normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit L2 norm."""
    return div(a, add(l2_norm(a, axis=axis, keepdims=True), eps))


# -- fused nonlinear ops --------------------------------------------------
def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < max(a.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def masked_logsumexp(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) over entries where ``mask`` is true, max-shift stabilized.

    Every slice along ``axis`` must contain at least one selected entry.
    """
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=axis).all():
        raise ContractError("masked_logsumexp: a slice has no selected entries")
    masked = np.where(mask, a.data, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (a,), backward, "masked_logsumexp")


def layernorm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gain/bias."""
    if eps <= 0:
        raise ContractError("layernorm: eps must be positive")
    a = as_tensor(a)
    gain = None if gain is None else as_tensor(gain)
    bias = None if bias is None else as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    D = x.shape[-1]

    def backward(g):
        dxhat = g * gain.data if gain is not None else g
        dx = rstd / D * (D * dxhat - dxhat.sum(-1, keepdims=True)
                         - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    parents = tuple(t for t in (a, gain, bias) if t is not None)
    return _make(out, parents, backward, "layernorm")


def fake_quant(a, gamma: float, bits: int) -> Tensor:
    """Quantize-dequantize with a straight-through gradient.

    Forward is ``gamma * clip(round(a / gamma))`` (round half to even).  The
    backward pass treats rounding as identity and zeroes the gradient where
    the value was clipped.
    """
    a = as_tensor(a)
    qmax = 2.0 ** (bits - 1) - 1.0
    scaled = a.data / gamma
    out = gamma * np.clip(np.round(scaled), -qmax, qmax)
    inside = np.abs(scaled) <= qmax
    return _make(out, (a,), lambda g: (np.where(inside, g, 0.0),), "fake_quant")

