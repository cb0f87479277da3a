"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every op records its parents and a closure computing parent gradients from the
output gradient. ``Tensor.backward`` walks that graph in reverse topological
order. The graph is rebuilt on every forward pass, so data-dependent control
flow (routing gates) needs no special handling.

Any op that produces NaN or Inf raises :class:`NonFiniteError`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DegenerateRowError, NonFiniteError, ShapeError

DTYPE = np.float64
RMS_EPS = 1e-6

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional float buffer with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else data.astype(dtype or DTYPE, copy=False)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Grads accumulate across calls; reset them with ``zero_grad``.
        """
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
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

    # -- operators -----------------------------------------------------
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

    def __getitem__(self, idx):
        return getitem(self, idx)

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

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)
    return _result(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, stable for any finite input."""
    out = _sigmoid_np(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x) evaluated as max(x, 0) + ln(1 + e^-|x|)."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    return _result(out, (x,), lambda g: (g * _sigmoid_np(d),), "softplus")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = x.data * s
    return _result(out, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),), "silu")


# -- shape and reduction ---------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)
    return _result(np.array(x.data[idx]), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dimensions broadcast like numpy.matmul."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return _result(out, (a, b), bw, "matmul")


# -- normalisation and probability ----------------------------------------

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` is True where an entry may receive weight.

    Masked entries get exactly zero probability.
    """
    d = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row with every entry masked")
        d = np.where(mask, d, -np.inf)
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _result(out, (x,), bw, "softmax")


def rms_norm(x: Tensor, scale: Tensor, eps: float = RMS_EPS) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * scale over the last axis."""
    if x.shape[-1] == 0:
        raise ShapeError("rms_norm over an empty axis")
    xd = x.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * r
    out = normed * scale.data

    def bw(g):
        gs = _unbroadcast(g * normed, scale.shape) if scale.requires_grad else None
        gx = None
        if x.requires_grad:
            gn = g * scale.data
            gx = r * (gn - normed * (gn * normed).mean(axis=-1, keepdims=True))
        return gx, gs
    return _result(out, (x, scale), bw, "rms_norm")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range for vocabulary of {table.shape[0]}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)
    return _result(table.data[ids], (table,), bw, "embedding")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-position -log softmax(logits)[target]; output has the shape of ``targets``."""
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ContractError(f"target id out of range for vocabulary of {v}")
    d = logits.data
    m = d.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(d - m).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(d, targets[..., None], axis=-1)
    out = (lse - picked)[..., 0]

    def bw(g):
        p = np.exp(d - lse)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * g[..., None],)
    return _result(out, (logits,), bw, "cross_entropy")


# -- positional and gating primitives ----------------------------------------

def rope_angles(positions, head_dim: int, base: float = 10000.0) -> np.ndarray:
    if head_dim % 2:
        raise ConfigError(f"rotary encoding needs an even head_dim, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=DTYPE) / head_dim)
    return np.outer(np.asarray(positions, dtype=DTYPE), inv_freq)


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate adjacent feature pairs (2i, 2i+1) of x[..., T, head_dim] by pos * base^(-2i/head_dim)."""
    hd = x.shape[-1]
    ang = rope_angles(positions, hd, base)
    if ang.shape[0] != x.shape[-2]:
        raise ShapeError(f"{ang.shape[0]} positions for a sequence of {x.shape[-2]}")
    cos, sin = np.cos(ang), np.sin(ang)
    pairs = x.data.reshape(x.shape[:-1] + (hd // 2, 2))
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = np.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], axis=-1).reshape(x.shape)

    def bw(g):
        gp = g.reshape(pairs.shape)
        g0, g1 = gp[..., 0], gp[..., 1]
        return (np.stack([g0 * cos + g1 * sin, -g0 * sin + g1 * cos], axis=-1).reshape(x.shape),)
    return _result(out, (x,), bw, "rope")


def straight_through_threshold(x: Tensor, threshold: float) -> Tensor:
    """Forward: 1.0 where x > threshold else 0.0. Backward: identity."""
    out = (x.data > threshold).astype(DTYPE)
    return _result(out, (x,), lambda g: (g,), "ste_threshold")


# -- testing helpers -------------------------------------------------------

def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int,
                   h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=DTYPE) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    with no_grad():
        for i in np.ndindex(target.shape):
            orig = target[i]
            target[i] = orig + h
            up = fn(*[Tensor(a) for a in base]).item()
            target[i] = orig - h
            down = fn(*[Tensor(a) for a in base]).item()
            target[i] = orig
            grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], arrays: Iterable, h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences over all inputs."""
    arrays = [np.array(a, dtype=DTYPE) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, relative_error(analytic, numerical_grad(fn, arrays, i, h)))
    return worst
