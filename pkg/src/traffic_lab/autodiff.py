"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure computing the vector-Jacobian product.  Nodes carry a monotonically
increasing creation index; :func:`backward` replays the tape in reverse
creation order, which is a valid topological order because a node's inputs
always exist before the node itself.

Subgradient conventions at kinks: ``relu'(0) = 0``, ``clamp'`` is 0 on the
boundary, and ``maximum``/``minimum``/``max`` route the gradient to the first
candidate on ties.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor", "tensor", "no_grad", "is_grad_enabled", "backward", "grad_check", "count_ops",
    "add", "sub", "mul", "div", "neg", "matmul", "power", "exp", "log", "sqrt",
    "tanh", "relu", "softplus", "sigmoid", "sin", "cos", "atan2", "clamp",
    "maximum", "minimum", "where", "concat", "stack", "softmax", "log_softmax",
    "logsumexp", "linear", "take", "segment_sum", "reduce_max",
]

_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_id", "op")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._id = next(_counter)
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def backward(self):
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    out._id = next(_counter)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# -- elementwise binary ------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)), "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    if p == 2:
        return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")
    return _make(ad ** p, (a,), lambda g: (p * g * ad ** (p - 1),), "pow")


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "maximum")
    first = a.data >= b.data
    return _make(np.where(first, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)),
                 "maximum")


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "minimum")
    first = a.data <= b.data
    return _make(np.where(first, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)),
                 "minimum")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant boolean mask holds, else ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


def atan2(y, x) -> Tensor:
    y, x = _as_tensor(y), _as_tensor(x)
    _check_broadcast(y, x, "atan2")
    yd, xd = y.data, x.data
    r2 = xd * xd + yd * yd
    return _make(np.arctan2(yd, xd), (y, x),
                 lambda g: (_unbroadcast(g * xd / r2, yd.shape),
                            _unbroadcast(-g * yd / r2, xd.shape)), "atan2")


# -- elementwise unary -------------------------------------------------------
def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("log of negative value")
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def _sigmoid_np(x):
    # split branches avoid overflow warnings for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    return _make(out, (a,), lambda g: (g * _sigmoid_np(ad),), "softplus")


def sin(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def clamp(a, lo=None, hi=None) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad > lo
    if hi is not None:
        inside &= ad < hi
    out = np.clip(ad, lo, hi)
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


# -- reductions --------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    shape = a.shape
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,),
                 lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[ax] for ax in axis]))
    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,),
                 lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)) / n,), "mean")


def reduce_max(a, axis=None, keepdims=False) -> Tensor:
    """Max over one axis (or all); gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    ad = a.data
    if axis is None:
        flat = int(np.argmax(ad))
        out = np.asarray(ad.reshape(-1)[flat])
        if keepdims:
            out = out.reshape((1,) * ad.ndim)

        def vjp(g):
            z = np.zeros(ad.size)
            z[flat] = np.asarray(g).reshape(-1)[0]
            return (z.reshape(ad.shape),)
        return _make(out, (a,), vjp, "max")
    axis = axis % ad.ndim
    kept = ad.max(axis=axis, keepdims=True)
    out = kept if keepdims else np.squeeze(kept, axis=axis)

    def vjp(g):
        # first maximal entry; argmax over a boolean mask is cheaper than over floats
        idx = np.expand_dims(np.argmax(ad == kept, axis=axis), axis)
        z = np.zeros_like(ad)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(z, idx, gg, axis=axis)
        return (z,)
    return _make(out, (a,), vjp, "max")


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(ad - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    w = e / s

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * w,)
    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), vjp, "logsumexp")


def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    e = np.exp(ad - np.max(ad, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), vjp, "softmax")


def log_softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


# -- linear algebra / structure ----------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _make(out, (a, b), vjp, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape); ``w`` is 2-D."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: cannot apply {w.shape} to {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    parents = (x, w)
    if b is not None:
        b = _as_tensor(b)
        out += b.data
        parents = (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)
    return _make(out.reshape(lead + (w.shape[1],)), parents, vjp, "linear")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1, ax2) -> Tensor:
    a = _as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = np.array(ad[idx])
    basic = _is_basic_index(idx)

    def vjp(g):
        z = np.zeros_like(ad)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)
    return _make(out, (a,), vjp, "getitem")


def take(a, indices, axis=0) -> Tensor:
    """Gather slices along ``axis`` with a constant integer index array."""
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ShapeError("take expects a 1-D index array")
    ad = a.data
    out = np.take(ad, indices, axis=axis)
    n = ad.shape[axis]

    def vjp(g):
        gm = np.moveaxis(g, axis, 0).reshape(indices.size, -1)
        z = np.zeros((n, gm.shape[1]))
        _scatter_rows(z, indices.reshape(-1), gm)
        rest = np.moveaxis(ad, axis, 0).shape[1:]
        return (np.moveaxis(z.reshape((n,) + rest), 0, axis),)
    return _make(out, (a,), vjp, "take")


def _scatter_rows(z, idx, rows):
    # bincount per column beats np.add.at for wide row blocks
    if rows.shape[1] == 0 or idx.size == 0:
        return
    if rows.shape[1] <= 4:
        np.add.at(z, idx, rows)
        return
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    z[sidx[starts]] += np.add.reduceat(rows[order], starts, axis=0)


def segment_sum(a, segment_ids, num_segments) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segment_ids``."""
    a = _as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    ad = a.data
    flat = ad.reshape(ad.shape[0], -1)
    z = np.zeros((num_segments, flat.shape[1]))
    _scatter_rows(z, seg, flat)
    out = z.reshape((num_segments,) + ad.shape[1:])
    return _make(out, (a,), lambda g: (g[seg],), "segment_sum")


def concat(tensors, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _make(out, ts, vjp, "concat")


def stack(tensors, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))
    return _make(out, ts, vjp, "stack")


# -- backward ----------------------------------------------------------------
def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = {}
    stack_ = [root]
    while stack_:
        n = stack_.pop()
        if n._id in nodes:
            continue
        nodes[n._id] = n
        stack_.extend(p for p in n._parents if p.requires_grad)
    grads = {root._id: np.ones(root.shape)}
    for nid in sorted(nodes, reverse=True):
        n = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if not n._parents:
            n.grad = g.copy() if n.grad is None else n.grad + g
            continue
        for p, pg in zip(n._parents, n._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                pg = np.broadcast_to(pg, p.shape)
            prev = grads.get(p._id)
            grads[p._id] = pg if prev is None else prev + pg


def count_ops(root: Tensor, op: str) -> int:
    """Number of distinct recorded nodes named ``op`` that ``root`` depends on."""
    seen, stack_, count = set(), [root], 0
    while stack_:
        n = stack_.pop()
        if n._id in seen:
            continue
        seen.add(n._id)
        count += n.op == op
        stack_.extend(n._parents)
    return count


def grad_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    The error per coordinate is ``|analytic - fd| / max(1, |fd|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise DomainError("function value is not finite")
    backward(out)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    fd = np.zeros_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            xp = flat.copy()
            xm = flat.copy()
            xp[k] += h
            xm[k] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).data
            fm = f(Tensor(xm.reshape(x0.shape))).data
            if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                raise DomainError("function value is not finite")
            fd.reshape(-1)[k] = (float(np.sum(fp)) - float(np.sum(fm))) / (2.0 * h)
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
    return float(err.max()) if err.size else 0.0
