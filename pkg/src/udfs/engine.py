"""Dense tensors with reverse-mode gradient accumulation.

Each op builds its output eagerly with numpy and, when any input requires a
gradient, records a closure that maps the output gradient to input gradients.
Ops keep the floating dtype of their inputs (float32 for model parameters);
reductions accumulate in float64.
"""
from __future__ import annotations

import contextlib
import warnings
from typing import Iterable, Sequence

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference passes)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    """Square root whose gradient is taken as 0 where the output is exactly 0."""
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(a.dtype),)

    return _make(out, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` (broadcastable to ``a``) is True by ``value``."""
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ShapeMismatch(f"mask shape {mask.shape} does not broadcast to {a.shape}") from None
    out = np.where(full, a.dtype.type(value), a.data)
    return _make(out, (a,), lambda g: (np.where(full, 0, g).astype(g.dtype),))


def dropout(a: Tensor, p: float, rng, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0:
        return a
    if p >= 1:
        raise ValueError("dropout probability must be < 1")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul shapes {a.shape} and {b.shape} are incompatible") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y64 = e / e.sum(axis=axis, keepdims=True)
    y = y64.astype(a.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        dot = (g64 * y64).sum(axis=axis, keepdims=True)
        return ((y64 * (g64 - dot)).astype(a.dtype),)

    return _make(y, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    probs = e / s

    def backward(g):
        return ((np.expand_dims(g, axis) * probs).astype(a.dtype),)

    return _make(out.astype(a.dtype), (a,), backward)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` (no affine)."""
    x = a.data.astype(np.float64)
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        g64 = g.astype(np.float64)
        gm = g64.mean(axis=axis, keepdims=True)
        gxm = (g64 * xhat).mean(axis=axis, keepdims=True)
        return ((inv * (g64 - gm - xhat * gxm)).astype(a.dtype),)

    return _make(xhat.astype(a.dtype), (a,), backward)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def slice_(a: Tensor, idx) -> Tensor:
    """Indexing (basic slices or integer-array gather)."""
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table`` (V, D) at integer ``indices`` -> indices.shape + (D,)."""
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch(f"embedding table must be 2-D, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[indices], (table,), backward)


# ---------------------------------------------------------------- autodiff


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    When ``params`` is given, parameters the loss does not depend on get a zero
    gradient and a warning is emitted.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    reached = set()
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        reached.add(id(node))
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    if params is not None:
        disconnected = []
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            if id(p) not in reached:
                disconnected.append(p.name or repr(p))
        if disconnected:
            warnings.warn(f"parameters not reachable from loss: {disconnected}", RuntimeWarning, stacklevel=2)


# ---------------------------------------------------------------- rng


class Rng:
    """Seeded Philox (counter-based) generator; same seed and calls, same draws."""

    algorithm = "philox4x64"

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    def spawn(self, *key: int) -> "Rng":
        """Independent child stream identified by ``key``."""
        return Rng(self.seed, self.key + tuple(key))

    @property
    def position(self) -> int:
        return int(self.generator.bit_generator.state["state"]["counter"][0])

    def random(self, shape=None) -> np.ndarray:
        return self.generator.random(shape)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self.generator.permutation(x)
