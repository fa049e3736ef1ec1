"""Minimal dense tensor with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient, the output records its parents and a closure mapping the output
gradient to input gradients. :func:`backward` walks recorded nodes in reverse
creation order, which is a valid reverse topological order because inputs are
always created before outputs.

Shapes are aligned explicitly. Elementwise binary ops accept equal shapes or a
scalar operand; anything else goes through :func:`broadcast_to`.
"""
from __future__ import annotations

import builtins
import itertools
from contextlib import contextmanager

import numpy as np
from scipy import sparse
from scipy.special import erf

__all__ = [
    "Tensor", "ShapeError", "NumericalError", "tensor", "zeros", "ones",
    "matmul", "add", "sub", "mul", "div", "scale", "neg", "sigmoid", "gelu",
    "exp", "log", "sum", "mean", "max_with_argmax", "concat", "split",
    "reshape", "transpose", "gather_rows", "scatter_rows", "broadcast_to",
    "clip", "l2_normalize", "group_norm", "backward", "no_grad",
    "mac_counter", "count_macs",
]

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested op."""


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_id", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_seq)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar; all routes through the module-level ops
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


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- MAC accounting ---------------------------------------------------------

_counters: list[dict] = []
_category: list[str] = ["other"]


@contextmanager
def mac_counter():
    """Collect multiply-accumulate counts per category for every matmul run
    inside the block. Yields a dict ``{category: macs}``."""
    counts: dict[str, int] = {}
    _counters.append(counts)
    try:
        yield counts
    finally:
        _counters.remove(counts)


@contextmanager
def count_macs(category):
    """Attribute matmuls inside the block to ``category``."""
    _category.append(category)
    try:
        yield
    finally:
        _category.pop()


def _record_macs(n):
    if _counters:
        cat = _category[-1]
        for c in _counters:
            c[cat] = c.get(cat, 0) + int(n)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes.

    Leading batch axes must match exactly, or one operand may be a plain 2-D
    matrix shared across the other's batch.
    """
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    _record_macs(out.size * a.shape[-1])

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            if a.ndim == 2 and ga.ndim > 2:
                ga = ga.reshape(-1, *ga.shape[-2:]).sum(0)
        if b.requires_grad:
            if b.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
                if b.ndim == 2 and gb.ndim > 2:
                    gb = gb.reshape(-1, *gb.shape[-2:]).sum(0)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


# -- elementwise ------------------------------------------------------------

def _binary_operands(a, b, op):
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    ref = ta if ta is not None else tb
    a = _as_tensor(a, like=ref)
    b = _as_tensor(b, like=ref)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")
    return a, b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b):
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def bw(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "mul")


def div(a, b):
    a, b = _binary_operands(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def scale(t, c):
    """Multiply by a Python constant."""
    t = _as_tensor(t)
    c = float(c)
    return _make(t.data * t.data.dtype.type(c), (t,), lambda g: (g * c,), "scale")


def neg(t):
    return scale(t, -1.0)


def sigmoid(t):
    t = _as_tensor(t)
    x = t.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _make(out, (t,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(t):
    """Exact GELU, x * Phi(x)."""
    t = _as_tensor(t)
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _make(out, (t,), bw, "gelu")


def exp(t):
    t = _as_tensor(t)
    out = np.exp(t.data)
    return _make(out, (t,), lambda g: (g * out,), "exp")


def log(t):
    t = _as_tensor(t)
    x = t.data
    return _make(np.log(x), (t,), lambda g: (g / x,), "log")


def clip(t, lo, hi):
    """Clamp to [lo, hi]; gradient passes where the input is inside the closed range."""
    t = _as_tensor(t)
    x = t.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (t,), lambda g: (g * inside,), "clip")


# -- reductions -------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    ax = axis + ndim if axis < 0 else axis
    if not 0 <= ax < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return ax


def sum(t, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    t = _as_tensor(t)
    ax = _norm_axis(axis, t.ndim)
    if ax is not None and t.shape[ax] == 0:
        raise ValueError("sum over an empty axis")
    out = np.asarray(t.data.sum(axis=ax, keepdims=keepdims))
    shape = t.shape

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (t,), bw, "sum")


def mean(t, axis=None, keepdims=False):
    t = _as_tensor(t)
    ax = _norm_axis(axis, t.ndim)
    n = t.size if ax is None else t.shape[ax]
    if n == 0:
        raise ValueError("mean over an empty axis")
    return scale(sum(t, axis=axis, keepdims=keepdims), 1.0 / n)


def max_with_argmax(t, axis=-1):
    """Maximum along ``axis`` and the index achieving it (lowest index on ties)."""
    t = _as_tensor(t)
    ax = _norm_axis(axis, t.ndim)
    if t.shape[ax] == 0:
        raise ValueError("max over an empty axis")
    idx = np.argmax(t.data, axis=ax)
    vals = np.take_along_axis(t.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)
    shape = t.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _make(vals, (t,), bw, "max"), idx


# -- restructuring ----------------------------------------------------------

def reshape(t, shape):
    t = _as_tensor(t)
    old = t.shape
    try:
        out = t.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (t,), lambda g: (g.reshape(old),), "reshape")


def transpose(t, axes=None):
    t = _as_tensor(t)
    if axes is None:
        axes = tuple(range(t.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(t.data.transpose(axes), (t,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis=0):
    tensors = [_as_tensor(x) for x in tensors]
    ref = tensors[0]
    ax = _norm_axis(axis, ref.ndim)
    for x in tensors[1:]:
        if x.ndim != ref.ndim or any(
            x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {x.shape}")
    out = np.concatenate([x.data for x in tensors], axis=ax)
    bounds = np.cumsum([x.shape[ax] for x in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tensors, bw, "concat")


def split(t, sizes, axis=0):
    """Split into consecutive chunks of the given sizes."""
    t = _as_tensor(t)
    ax = _norm_axis(axis, t.ndim)
    if builtins.sum(sizes) != t.shape[ax]:
        raise ShapeError(f"split sizes {sizes} do not cover axis of length {t.shape[ax]}")
    bounds = np.cumsum(sizes)[:-1]
    starts = [0, *bounds]
    outs = []
    for start, size in zip(starts, sizes):
        sl = [slice(None)] * t.ndim
        sl[ax] = slice(start, start + size)
        sl = tuple(sl)
        shape, dtype = t.shape, t.dtype

        def bw(g, sl=sl, shape=shape, dtype=dtype):
            gx = np.zeros(shape, dtype=dtype)
            gx[sl] = g
            return (gx,)

        outs.append(_make(t.data[sl].copy(), (t,), bw, "split"))
    return outs


def broadcast_to(t, shape):
    """Explicitly expand size-1 (or missing leading) axes; backward sums them."""
    t = _as_tensor(t)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(t.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    src = t.shape
    lead = len(shape) - len(src)
    red = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1
    )

    def bw(g):
        g = g.sum(axis=red, keepdims=True) if red else g
        return (g.reshape(src),)

    return _make(out, (t,), bw, "broadcast_to")


def _selection_matrix(idx, n):
    idx = np.asarray(idx).ravel()
    m = idx.size
    return sparse.csr_matrix(
        (np.ones(m, dtype=np.float64), (np.arange(m), idx)), shape=(m, n)
    )


def _apply_rows(mat, x):
    """Apply a sparse (m, n) matrix to axis -2 of x with shape (..., n, d)."""
    lead = x.shape[:-2]
    n, d = x.shape[-2:]
    flat = np.moveaxis(x.reshape(-1, n, d), 1, 0).reshape(n, -1)
    res = np.asarray(mat @ flat, dtype=x.dtype)
    m = res.shape[0]
    return np.moveaxis(res.reshape(m, -1, d), 0, 1).reshape(*lead, m, d)


def gather_rows(t, idx):
    """Select rows along axis -2. ``idx`` may have any shape; the output shape
    is ``(*batch, *idx.shape, d)``. Backward scatter-adds."""
    t = _as_tensor(t)
    idx = np.asarray(idx, dtype=np.int64)
    n = t.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range for {n} rows")
    out = np.take(t.data, idx.ravel(), axis=-2)
    out = out.reshape(*t.shape[:-2], *idx.shape, t.shape[-1])
    holder = {}

    def bw(g):
        if "m" not in holder:
            holder["m"] = _selection_matrix(idx, n).T.tocsr()
        g = g.reshape(*t.shape[:-2], idx.size, t.shape[-1])
        return (_apply_rows(holder["m"], g),)

    return _make(out, (t,), bw, "gather_rows")


def scatter_rows(t, idx, n):
    """Adjoint of :func:`gather_rows`: add row ``k`` of ``t`` into row ``idx[k]``
    of a zero tensor with ``n`` rows."""
    t = _as_tensor(t)
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if t.shape[-2] != idx.size:
        raise ShapeError(f"scatter_rows: {t.shape[-2]} rows but {idx.size} indices")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"scatter_rows index out of range for {n} rows")
    mat = _selection_matrix(idx, n).T.tocsr()
    out = _apply_rows(mat, t.data)

    def bw(g):
        return (np.take(g, idx, axis=-2),)

    return _make(out, (t,), bw, "scatter_rows")


# -- normalization ----------------------------------------------------------

def l2_normalize(t, eps=1e-6):
    """Rows divided by max(||row||, eps) along the last axis."""
    t = _as_tensor(t)
    x = t.data
    norm = np.sqrt((x * x).sum(-1, keepdims=True))
    active = norm > eps
    denom = np.where(active, norm, eps).astype(x.dtype)
    y = x / denom

    def bw(g):
        proj = (g * y).sum(-1, keepdims=True)
        gx = np.where(active, (g - y * proj) / denom, g / denom)
        return (gx,)

    return _make(y, (t,), bw, "l2_normalize")


def group_norm(t, groups, gamma, beta, eps=1e-5):
    """Normalize each point's channels within ``groups`` groups, then apply a
    per-channel affine map. Normalization statistics are per point."""
    t = _as_tensor(t)
    d = t.shape[-1]
    if groups < 1 or d % groups:
        raise ValueError(f"channel count {d} not divisible by groups={groups}")
    gamma = _as_tensor(gamma, like=t)
    beta = _as_tensor(beta, like=t)
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"group_norm affine params must have shape ({d},)")
    x = t.data.reshape(*t.shape[:-1], groups, d // groups)
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(t.shape).astype(t.dtype, copy=False)
    gd, bd = gamma.data, beta.data
    out = xhat * gd + bd

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if t.requires_grad:
            gh = (g * gd).reshape(x.shape)
            xh = xhat.reshape(x.shape)
            gx = inv * (gh - gh.mean(-1, keepdims=True) - xh * (gh * xh).mean(-1, keepdims=True))
            gx = gx.reshape(t.shape)
        return gx, ggamma, gbeta

    return _make(out, (t, gamma, beta), bw, "group_norm")


# -- backward ---------------------------------------------------------------

def backward(loss, params=None):
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every leaf that requires one.
    Returns ``{param: grad}`` for ``params`` (zeros for params the loss does
    not depend on); if ``params`` is None, for every reached leaf.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericalError("loss is not finite")
    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes or not node.requires_grad:
            continue
        nodes[node._id] = node
        stack.extend(node._parents)
    grads = {loss._id: np.ones_like(loss.data)}
    leaves = []
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if node._backward is None:
            if g is not None:
                leaves.append(node)
                node.grad = g if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg
    if params is None:
        return {leaf: leaf.grad for leaf in leaves}
    out = {}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[p] = p.grad
    return out
