"""A small reverse-mode autodiff engine over numpy arrays.

Every primitive computes its forward value eagerly and, when any input
requires a gradient, records a closure that maps the output gradient to
input gradients. :meth:`Tensor.backward` walks the recorded graph in
reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import DegenerateInputError, DimensionError, OracleError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # ---- introspection -------------------------------------------------
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def zero_grad(self):
        self.grad = None

    # ---- autodiff ------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.size != 1:
                raise DimensionError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ---- operators -----------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` that need gradients, root first."""
    seen = set()
    post = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    post.reverse()
    return post


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a.data, b.data, "mul")
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def gelu(x) -> Tensor:
    x = as_tensor(x)
    flat = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1] if x.ndim else 1))
    out = _kernels.gelu_fwd(flat).reshape(x.shape)

    def backward(g):
        gf = np.ascontiguousarray(g.reshape(flat.shape))
        return (_kernels.gelu_bwd(flat, gf).reshape(x.shape),)

    return _make(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


# --------------------------------------------------------------------------
# linear algebra and shape
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DegenerateInputError("concat of nothing")
    dtype = np.result_type(*[t.dtype for t in ts])
    try:
        out = np.concatenate([t.data.astype(dtype, copy=False) for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        parts = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            parts.append(g[tuple(sl)] if t.requires_grad else None)
        return tuple(parts)

    return _make(out, ts, backward)


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; the backward pass scatter-adds."""
    a = as_tensor(a)
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def scatter_rows(x, index: np.ndarray, size: int) -> Tensor:
    """Place ``x[b, k]`` at row ``index[b, k]`` of a zero ``(B, size, ...)`` output."""
    x = as_tensor(x)
    index = np.asarray(index)
    if index.shape != x.shape[:2]:
        raise DimensionError(f"scatter_rows: index {index.shape} vs rows {x.shape[:2]}")
    out = np.zeros((x.shape[0], size) + x.shape[2:], dtype=x.dtype)
    b = np.arange(x.shape[0])[:, None]
    out[b, index] = x.data
    return _make(out, (x,), lambda g: (g[b, index],))


def take_rows(x, index: np.ndarray) -> Tensor:
    """``out[b, k] = x[b, index[b, k]]``."""
    x = as_tensor(x)
    index = np.asarray(index)
    b = np.arange(x.shape[0])[:, None]
    return getitem(x, (b, index))


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise DegenerateInputError("mean over an empty axis")
    return tsum(a, axis, keepdims) * (1.0 / count)


# --------------------------------------------------------------------------
# normalisation and attention pieces
# --------------------------------------------------------------------------


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DegenerateInputError("softmax over an empty axis")
    flat = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1]))
    y = _kernels.softmax_fwd(flat)

    def backward(g):
        gf = np.ascontiguousarray(g.reshape(y.shape))
        return (_kernels.softmax_bwd(y, gf).reshape(x.shape),)

    return _make(y.reshape(x.shape), (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    f = x.shape[-1] if x.ndim else 0
    if f == 0:
        raise DegenerateInputError("layer_norm over an empty axis")
    if gamma.shape != (f,) or beta.shape != (f,):
        raise DimensionError(f"layer_norm: scale/offset must have shape ({f},)")
    flat = np.ascontiguousarray(x.data.reshape(-1, f))
    g_, b_ = gamma.data.astype(x.dtype, copy=False), beta.data.astype(x.dtype, copy=False)
    y, xhat, rstd = _kernels.layer_norm_fwd(flat, g_, b_, eps)

    def backward(g):
        gf = np.ascontiguousarray(g.reshape(flat.shape))
        dx, dgamma, dbeta = _kernels.layer_norm_bwd(gf, xhat, rstd, g_)
        return dx.reshape(x.shape), dgamma, dbeta

    return _make(y.reshape(x.shape), (x, gamma, beta), backward)


def weighted_square_error(pred, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """``sum(weights * (pred - target)**2)`` as a scalar."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    weights = np.asarray(weights, dtype=pred.dtype)
    if target.shape != pred.shape or weights.shape != pred.shape:
        raise DimensionError(f"shapes differ: {pred.shape}, {target.shape}, {weights.shape}")
    diff = pred.data - target
    out = np.sum(weights * diff * diff)
    return _make(out, (pred,), lambda g: (2.0 * g * weights * diff,))


def mse_masked(pred, target, mask) -> Tensor:
    """Mean squared error over the elements selected by ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise DegenerateInputError("mask selects no elements")
    pred = as_tensor(pred)
    return weighted_square_error(pred, target, mask / count)


def bce_with_logits(logits, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, numerically stable in the logit."""
    z = as_tensor(logits)
    y = np.asarray(labels, dtype=z.dtype)
    if y.shape != z.shape:
        raise DimensionError("logits and labels differ in shape")
    x = z.data
    loss = np.mean(np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x))))
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(np.asarray(loss), (z,), lambda g: (g * (p - y) / x.size,))


# --------------------------------------------------------------------------
# gradient oracle
# --------------------------------------------------------------------------


def check_gradients(f: Callable[[Tensor], Tensor], point, h: float = 1e-5,
                    floor: float = 1e-8) -> float:
    """Max elementwise relative error between reverse-mode and central differences.

    ``f`` maps a Tensor to a scalar Tensor. Evaluation runs in float64.
    The relative error of entry ``i`` is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``.
    """
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise OracleError("function is not finite at the evaluation point")
    y.backward()
    analytic = np.zeros_like(x0) if x.grad is None else x.grad
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        fm = float(f(Tensor(xm.reshape(x0.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite evaluation at coordinate {i}")
        flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
