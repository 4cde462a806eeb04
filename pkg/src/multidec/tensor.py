"""Dense tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor`; when gradient recording is enabled
and any input requires a gradient, the output remembers its parents and a
local gradient rule. :meth:`Tensor.backward` walks the recorded graph once in
reverse topological order.

Broadcasting rule (the only one supported by binary ops): the two operand
shapes must be equal, or one of them must be a suffix of the other (trailing
dimension expansion, e.g. ``(B, T, d) + (d,)``), or one of them is a scalar.
Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "GraphError",
    "RngContext",
    "no_grad",
    "is_grad_enabled",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "tensor",
    "zeros",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "exp",
    "log",
    "tanh",
    "softmax",
    "log_softmax",
    "logsumexp",
    "layer_norm",
    "reshape",
    "transpose",
    "take",
    "pick",
    "pad",
    "dropout",
    "total",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an op's mathematical domain."""


class GraphError(RuntimeError):
    """Misuse of the recorded computation graph."""


_local = threading.local()
_default_dtype = np.dtype(np.float32)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating point precision."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class RngContext:
    """Owner of the single seedable generator used by stochastic ops.

    Backed by numpy's counter-based Philox bit generator, so a seed fully
    determines every draw.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def random(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator.random(shape, dtype=dtype)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, std, size=shape)

    def uniform(self, shape, bound: float) -> np.ndarray:
        return self.generator.uniform(-bound, bound, size=shape)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _index(self, index)

    def sum(self, axis=None):
        return total(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return scale(total(self, axis), 1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self) -> None:
        """Populate ``grad`` of every leaf that requires one.

        Leaf gradients accumulate across separate graphs until ``zero_grad``;
        a graph whose interior nodes were already back-propagated is rejected.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")
        order = _topological(self)
        for node in order:
            if node._consumed:
                raise GraphError("graph was already consumed by a previous backward()")
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
            node._consumed = True
            node._backward = None


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


# --- broadcasting -----------------------------------------------------------

def _check_broadcast(sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) == 0 or big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"shapes {sa} and {sb} are not trailing-dimension compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + shape).sum(axis=0)


# --- binary ops ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either a plain ``(k, n)`` matrix shared
    across the leading axes of ``a`` or ``(..., k, n)`` with identical leading
    axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if bd.ndim == 2:
        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward, "matmul")


# --- elementwise unary --------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    if not np.isfinite(out).all():
        raise DomainError("exp overflow: result is not finite")
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


# --- reductions and normalisers ---------------------------------------------

def total(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    if axis is None:
        def backward(g):
            return (np.broadcast_to(g, shape).copy(),)
        return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), backward, "sum")


def _check_mask(mask: np.ndarray) -> None:
    if not mask.any(axis=-1).all():
        raise ShapeError("attention mask forbids every key for some query")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a constant boolean array broadcastable to ``x`` (True keeps);
    masked entries get exactly zero probability.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        _check_mask(mask)
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def logsumexp(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    out = (m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True)))[..., 0]

    def backward(g):
        return (np.exp(xd - out[..., None]) * g[..., None],)

    return _make(out, (x,), backward, "logsumexp")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _make(out, (x, gain, bias), backward, "layer_norm")


# --- shape and indexing -------------------------------------------------------

def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Iterable[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def _index(x: Tensor, index) -> Tensor:
    src = x.shape

    def backward(g):
        gz = np.zeros(src, dtype=g.dtype)
        np.add.at(gz, index, g)
        return (gz,)

    return _make(x.data[index], (x,), backward, "index")


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` (embedding lookup, unfolding)."""
    idx = np.asarray(idx)
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for axis of size {n}")
    src = x.shape
    lead = (slice(None),) * axis

    def backward(g):
        gz = np.zeros(src, dtype=g.dtype)
        np.add.at(gz, lead + (idx,), g)
        return (gz,)

    return _make(np.take(x.data, idx, axis=axis), (x,), backward, "take")


def pick(x: Tensor, idx) -> Tensor:
    """Select ``x[..., idx[...]]`` from the last axis (target log-probs)."""
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"pick index shape {idx.shape} != {x.shape[:-1]}")
    src = x.shape
    sel = idx[..., None]

    def backward(g):
        gz = np.zeros(src, dtype=g.dtype)
        np.put_along_axis(gz, sel, g[..., None], axis=-1)
        return (gz,)

    return _make(np.take_along_axis(x.data, sel, axis=-1)[..., 0], (x,), backward, "pick")


def pad(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad ``x`` along ``axis``."""
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    n = x.shape[axis]
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(before, before + n)
    sl = tuple(sl)
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[sl],), "pad")


def dropout(x: Tensor, p: float, rng: RngContext | None, training: bool) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or not training."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout during training requires an RngContext")
    keep = (rng.random(x.shape, dtype=x.dtype) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Hook for ops defined outside this module (e.g. the CTC loss)."""
    return _make(data, parents, backward, op)
