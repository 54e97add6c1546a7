"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation builds a :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to parent gradients.
:meth:`Tensor.backward` walks the graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class ShapeError(ValueError):
    pass


class Tensor:
    """An n-dimensional array that can take part in a differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else None
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
        out = Tensor(data, dtype=data.dtype)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

        ``grad`` may be given to seed a non-scalar root; otherwise the root
        must be a scalar. Calling twice without zeroing accumulates.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != root shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return Tensor._make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._make(a.data ** exponent, (a,), backward, "pow")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value; clamp the input first")
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is 1 inside the interval and 0 outside."""
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (a.data >= lo_) & (a.data <= hi_)
    return Tensor._make(np.clip(a.data, lo_, hi_).astype(a.dtype, copy=False),
                        (a,), lambda g: (g * inside,), "clamp")


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``. Gradients are routed, never blended."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    zero = np.zeros((), dtype=out.dtype)

    def backward(g):
        return (_unbroadcast(np.where(mask, g, zero), a.shape),
                _unbroadcast(np.where(mask, zero, g), b.shape))

    return Tensor._make(out, (a, b), backward, "where")


# -- reductions and shape ------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=a.dtype), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(out), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join tensors along ``axis``; all other extents must agree."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(
                f"cannot concatenate shapes {[tuple(x.shape) for x in tensors]} along axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                for i in range(len(tensors))]

    return Tensor._make(out, tuple(tensors), backward, "concat")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._make(out, (a,), backward, "softmax")


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def _unfold(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape (C*kh*kw, N*ho*wo) from a padded NCHW array."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _fold(cols: np.ndarray, xshape, kh, kw, stride, pad, ho, wo) -> np.ndarray:
    n, c, h, w = xshape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (NCHW input, FCkhkw weight) via patch unfolding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"input has {c} channels but weight {w.shape} expects {cw}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _unfold(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(f, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data.reshape(f, 1)
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(f, -1)
        dw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dx = _fold(wmat.T @ gmat, x.shape, kh, kw, stride, padding, ho, wo)
        grads = [dx, dw]
        if b is not None:
            grads.append(gmat.sum(axis=1))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(np.ascontiguousarray(out), parents, backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, wd = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (wd + 2 * padding - kernel) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    best = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int32)
    for i in range(kernel):
        for j in range(kernel):
            win = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            better = win > best
            best = np.where(better, win, best)
            arg[better] = i * kernel + j

    def backward(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                sel = arg == i * kernel + j
                gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * sel
        if padding:
            gp = gp[:, :, padding:-padding, padding:-padding]
        return (gp,)

    return Tensor._make(best, (x,), backward, "max_pool2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...], eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize with batch statistics over ``axes``; returns (output, mean, biased var)."""
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    shape = mu.shape
    g_ = gamma.data.reshape(shape)
    out = xhat * g_ + beta.data.reshape(shape)
    count = x.data.size // mu.size

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes).reshape(gamma.shape)
        dbeta = g.sum(axis=axes).reshape(beta.shape)
        dxhat = g * g_
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / count)
        return dx, dgamma, dbeta

    out_t = Tensor._make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")
    return out_t, mu.reshape(-1), var.reshape(-1)


def reverse_gradient(x: Tensor, lam: float) -> Tensor:
    """Identity forward; the backward pass scales the gradient by ``-lam``."""
    scale = -float(lam)

    def backward(g):
        if scale == 0.0:
            return (np.zeros_like(g),)
        return (g * np.asarray(scale, dtype=g.dtype),)

    return Tensor._make(x.data.copy(), (x,), backward, "grl")


# -- finite-difference checking ------------------------------------------------


def numerical_grad(f: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``param.data`` (mutated in place, then restored)."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = float(f().data)
        flat[i] = old - step
        lo = float(f().data)
        flat[i] = old
        grad.reshape(-1)[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|), denominators floored at 1e-3 of the array scale and at 1e-6."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(1e-3 * scale, 1e-6))
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between backward() and finite differences over ``params``."""
    for p in params:
        p.zero_grad()
    f().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, relative_error(analytic, numerical_grad(f, p, step)))
    return worst
