"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node (parents plus an adjoint closure) stamped with a
monotonically increasing sequence number, so the graph's topological order is
its insertion order. :meth:`Tensor.backward` walks the reachable nodes in
reverse sequence order and frees the graph afterwards.

Broadcasting is deliberately narrow: the result shape of a binary op must
equal the shape of one of its operands (leading-axis expansion or size-1
expansion of the other). Mutual broadcasting such as ``(3, 1) + (1, 4)`` is
rejected.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _core

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """backward() was called on a graph that was already differentiated."""


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


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype, copy=None)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self._consumed = False
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

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
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operators --------------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; only a non-finite sum needs the full scan
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out._consumed = False
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _coerce(a, b):
    """Promote plain numbers / arrays to tensors sharing the other operand's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _broadcast_shape(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {sa} and {sb}") from None
    if out != sa and out != sb:
        raise ValueError(f"{op}: mutual broadcasting of {sa} and {sb} is not supported")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if p == 2:
        return _make(ad * ad, (a,), lambda g: (2 * g * ad,), "pow")
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bw(g):
        return (g / (2 * out),)

    return _make(out, (a,), bw, "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def elementwise(kind: str, *tensors) -> Tensor:
    """Dispatch by name: add, sub, mul, div, sqrt, relu, exp."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div, "sqrt": sqrt, "relu": relu, "exp": exp, "log": log}
    try:
        fn = ops[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*tensors)


def stop_gradient(a) -> Tensor:
    """Same values, no gradient flows back."""
    a = as_tensor(a)
    return Tensor(a.data, dtype=a.dtype)


# -- reductions and shape -------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    m = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if m == 0:
        raise ValueError("mean over empty axes")
    return tsum(a, axes, keepdims) * (1.0 / m)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across them or has exactly the same leading axes.
    """
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch axes differ ({a.shape} @ {b.shape})")
    if a.ndim == 2 and b.ndim > 2:
        raise ValueError("matmul: batched right operand needs a batched left operand")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` as one node; ``x`` may have leading axes, ``w`` is ``(k, n)``."""
    x, w = _coerce(x, w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: shapes {x.shape} and {w.shape} do not chain")
    if b is not None:
        b = as_tensor(b, dtype=x.dtype)
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data
    lead = x.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(lead + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "linear")


def getitem(a, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[index] = g
        return (out,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


# -- normalization primitives ---------------------------------------------

def normalize(x, mean, var, eps: float, gamma=None, beta=None, row_mask=None) -> Tensor:
    """``((x - mean) / sqrt(var + eps)) * gamma + beta`` as one node.

    ``mean``/``var`` are per-feature ``(d,)`` or keepdims-shaped against ``x``;
    ``gamma``/``beta`` are ``(d,)``. Rows where ``row_mask`` (shape
    ``x.shape[:-1]``) is false are set to zero.
    """
    x = as_tensor(x)
    mean, var = as_tensor(mean, dtype=x.dtype), as_tensor(var, dtype=x.dtype)
    _broadcast_shape(x.shape, mean.shape, "normalize")
    if mean.shape != var.shape:
        raise ValueError("normalize: mean and var shapes differ")
    if np.any(var.data + eps <= 0):
        raise ValueError("normalize: non-positive variance + eps")
    inv = 1.0 / np.sqrt(var.data + x.dtype.type(eps))
    xhat = (x.data - mean.data) * inv
    keep = None
    if row_mask is not None and not np.all(row_mask):
        keep = np.asarray(row_mask, dtype=x.dtype)[..., None]
    parents = [x, mean, var]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma, dtype=x.dtype)
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta, dtype=x.dtype)
        out = out + beta.data
        parents.append(beta)
    if keep is not None:
        out = out * keep
    ms = mean.shape
    d = x.shape[-1]

    def bw(g):
        if keep is not None:
            g = g * keep
        gy = g if gamma is None else g * gamma.data
        gx = gy * inv
        gm = _unbroadcast(-gx, ms)
        gv = _unbroadcast(-0.5 * gy * xhat, ms) * (inv * inv)
        grads = [gx, gm, gv]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return grads

    return _make(out, parents, bw, "normalize")


def attention(qkv, key_bias: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention as one node.

    ``qkv`` is ``(B, T, 3d)`` holding query, key and value projections side
    by side; ``key_bias`` broadcasts against ``(B, heads, T, T)`` scores
    (0 for visible keys, a large negative number for masked ones). Returns
    the merged head outputs ``(B, T, d)``.
    """
    qkv = as_tensor(qkv)
    b, t, d3 = qkv.shape
    d = d3 // 3
    if d3 != 3 * d or d % heads:
        raise ValueError(f"attention: width {d3} incompatible with {heads} heads")
    dh = d // heads
    scale = qkv.dtype.type(1.0 / np.sqrt(dh))
    parts = qkv.data.reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = parts[0], parts[1], parts[2]
    scores = (q @ np.swapaxes(k, -1, -2)) * scale + key_bias
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = p @ v
    out = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)

    def bw(g):
        gctx = g.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
        gv = np.swapaxes(p, -1, -2) @ gctx
        gp = gctx @ np.swapaxes(v, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k
        gk = np.swapaxes(gs, -1, -2) @ q
        full = np.stack([gq, gk, gv]).transpose(1, 3, 0, 2, 4).reshape(b, t, d3)
        return (full,)

    return _make(out, (qkv,), bw, "attention")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def cross_entropy(logits, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_index.

    ``logits`` has shape ``(..., V)``; ``targets`` has the leading shape.
    """
    logits = as_tensor(logits)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tgt = np.asarray(targets).reshape(-1)
    valid = tgt != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy: no valid targets")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    idx = np.where(valid, tgt, 0)
    nll = lse - z[np.arange(len(tgt)), idx]
    loss = np.asarray((nll * valid).sum() / n, dtype=logits.dtype)
    shape = logits.shape

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(tgt)), idx] -= 1.0
        p *= (valid / n)[:, None]
        return ((g * p).reshape(shape).astype(logits.dtype, copy=False),)

    return _make(loss, (logits,), bw, "cross_entropy")


def embedding(table, indices: np.ndarray) -> Tensor:
    """Rows of ``table`` gathered by integer ``indices`` (any shape)."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[idx], (table,), bw, "embedding")


def dropout(a, p: float, rng: np.random.Generator | None) -> Tensor:
    a = as_tensor(a)
    if p <= 0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def reduce_moments(x, axes, mask: np.ndarray | None = None, keepdims: bool = False):
    """Biased mean and variance of ``x`` over ``axes``.

    If ``mask`` is given it must have the shape of the reduced axes taken in
    order (e.g. ``(B, T)`` for ``x`` of shape ``(B, T, d)`` reduced over
    ``(0, 1)``), and only positions where it is true contribute. Returns two
    differentiable tensors ``(mean, var)``.
    """
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    if not axes:
        raise ValueError("reduce_moments: empty axis set")
    xd = x.data
    leading = axes == tuple(range(len(axes)))

    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        red_shape = tuple(x.shape[i] for i in axes)
        if mask.shape != red_shape or not leading:
            raise ValueError(f"reduce_moments: mask shape {mask.shape} does not match reduced axes {red_shape}")
        flat = np.ascontiguousarray(xd.reshape(-1, int(np.prod(x.shape[len(axes):], dtype=int))))
        mean64, var64, m = _core.masked_moments(flat, np.ascontiguousarray(mask.reshape(-1)).view(np.uint8))
        if m == 0:
            raise ValueError("reduce_moments: empty reduction (no valid positions)")
        tail = x.shape[len(axes):]
        with np.errstate(over="ignore"):
            mean = mean64.astype(x.dtype).reshape(tail)
            var = var64.astype(x.dtype).reshape(tail)
        w = (mask / m).astype(x.dtype).reshape(mask.shape + (1,) * len(tail))
        if keepdims:
            mean = mean.reshape((1,) * len(axes) + tail)
            var = var.reshape((1,) * len(axes) + tail)
    else:
        m = int(np.prod([x.shape[i] for i in axes]))
        if m == 0:
            raise ValueError("reduce_moments: empty reduction")
        mean = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mean) ** 2).mean(axis=axes, keepdims=True)
        w = None
        if not keepdims:
            mean = mean.reshape([n for i, n in enumerate(x.shape) if i not in axes])
            var = var.reshape(mean.shape)
    np.maximum(var, 0, out=var)

    def expand(g):
        if keepdims:
            return g
        if mask is not None:
            return g.reshape((1,) * len(axes) + g.shape)
        return np.expand_dims(g, axes)

    def bw_mean(g):
        g = expand(g)
        if w is None:
            return (np.broadcast_to(g / m, x.shape).copy(),)
        return (np.broadcast_to(g, x.shape) * w,)

    def bw_var(g):
        g = expand(g)
        centered = xd - expand(mean)
        if w is None:
            return (2.0 * g * centered / m,)
        return (2.0 * g * centered * w,)

    return _make(mean, (x,), bw_mean, "moments.mean"), _make(var, (x,), bw_var, "moments.var")


# -- backward -------------------------------------------------------------

def _reachable(root: Tensor) -> list:
    seen = set()
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(node._parents)
    order.sort(key=lambda t: t._seq, reverse=True)
    return order


def backward(loss: Tensor, grad=None) -> dict:
    """Reverse-mode accumulation from ``loss``.

    Gradients are added into ``.grad`` of every leaf with ``requires_grad``;
    the returned dict maps those leaves to their gradients. The graph is freed,
    so a second call without a fresh forward raises :class:`GraphConsumedError`.
    """
    if loss._consumed:
        raise GraphConsumedError("graph already differentiated; run the forward pass again")
    if grad is None:
        if loss.size != 1:
            raise ValueError("backward() without a seed gradient needs a scalar loss")
        grad = np.ones_like(loss.data)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    leaves = {}
    for node in _reachable(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None
        node._consumed = True
    loss._consumed = True
    return leaves


def grad(loss: Tensor, params: Iterable[Tensor]) -> list:
    """Gradients of ``loss`` w.r.t. ``params`` (zeros where unreachable)."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# -- finite differences ---------------------------------------------------

def finite_diff(loss_fn: Callable[[], float], params: Sequence[Tensor], step: float = 1e-5, indices=None) -> list:
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``params``.

    ``params`` are perturbed in place and restored. ``indices``, if given, is
    a list (one entry per param) of flat coordinates to probe; the others stay
    zero in the returned arrays.
    """
    out = []
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        g = np.zeros(flat.shape, dtype=np.float64)
        coords = range(flat.size) if indices is None else indices[k]
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn())
            flat[i] = orig - step
            fm = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"finite_diff: non-finite loss at coordinate {i} of param {k}")
            g[i] = (fp - fm) / (2 * step)
        out.append(g.reshape(p.shape))
    return out


def relative_error(a, b) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
