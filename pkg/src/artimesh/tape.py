"""Reverse-mode autodiff tape over a fixed numpy op set.

Every differentiable quantity in the pipeline is a :class:`Tensor`.  Ops
build a DAG of parent links plus a backward closure; :func:`backward`
topologically walks the DAG and accumulates gradients into leaf tensors
that have ``requires_grad`` set.  Gradients of interior nodes live only
inside the walk, so calling backward twice on the same graph accumulates
exactly twice into the leaves.

Tests run in float64; training defaults to float32 (finite-difference
checks are unreliable in 32-bit).  Python scalars stay weak in promotion,
so mixing them into float32 graphs does not upcast.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Shape mismatch, annotated with the offending op."""


class NonScalarLossError(ValueError):
    """backward() was asked to differentiate a non-scalar."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        a = np.asarray(data)
        if a.dtype.kind != "f":
            a = a.astype(np.float64)
        self.data = a
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None

    # -- introspection -------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar (bound at module bottom) --------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _val(x):
    return x.data if isinstance(x, Tensor) else x


def _live(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def constant(x, dtype=None) -> Tensor:
    a = np.asarray(x)
    if dtype is not None:
        a = a.astype(dtype)
    return Tensor(a)


def _make(data: np.ndarray, parents, bw) -> Tensor:
    out = Tensor(data)
    out.requires_grad = True
    out._parents = parents
    out._bw = bw
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- backward driver ----------------------------------------------------------

def backward(loss: Tensor, seed=None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.data.shape}")
    if seed is None:
        seed = np.ones_like(loss.data)

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    acc: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.data.dtype)}
    for node in reversed(topo):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node._bw is not None:
            for parent, contrib in node._bw(g):
                pid = id(parent)
                prev = acc.get(pid)
                acc[pid] = contrib if prev is None else prev + contrib
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += _unbroadcast(np.asarray(g), node.data.shape)


def forward(graph_fn, *inputs: Tensor) -> Tensor:
    """Evaluate graph_fn on the inputs, recording the tape as it goes."""
    return graph_fn(*inputs)


# -- arithmetic ------------------------------------------------------------------

def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    try:
        data = av + bv
    except ValueError as e:
        raise ShapeError(f"op add: {np.shape(av)} vs {np.shape(bv)}") from e
    la, lb = _live(a), _live(b)
    if not (la or lb):
        return Tensor(data)

    def bw(g):
        out = []
        if la:
            out.append((a, _unbroadcast(g, a.shape)))
        if lb:
            out.append((b, _unbroadcast(g, b.shape)))
        return out

    return _make(data, tuple(t for t in (a, b) if _live(t)), bw)


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    try:
        data = av - bv
    except ValueError as e:
        raise ShapeError(f"op sub: {np.shape(av)} vs {np.shape(bv)}") from e
    la, lb = _live(a), _live(b)
    if not (la or lb):
        return Tensor(data)

    def bw(g):
        out = []
        if la:
            out.append((a, _unbroadcast(g, a.shape)))
        if lb:
            out.append((b, _unbroadcast(-g, b.shape)))
        return out

    return _make(data, tuple(t for t in (a, b) if _live(t)), bw)


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    try:
        data = av * bv
    except ValueError as e:
        raise ShapeError(f"op mul: {np.shape(av)} vs {np.shape(bv)}") from e
    la, lb = _live(a), _live(b)
    if not (la or lb):
        return Tensor(data)

    def bw(g):
        out = []
        if la:
            out.append((a, _unbroadcast(g * bv, a.shape)))
        if lb:
            out.append((b, _unbroadcast(g * av, b.shape)))
        return out

    return _make(data, tuple(t for t in (a, b) if _live(t)), bw)


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    try:
        data = av / bv
    except ValueError as e:
        raise ShapeError(f"op div: {np.shape(av)} vs {np.shape(bv)}") from e
    la, lb = _live(a), _live(b)
    if not (la or lb):
        return Tensor(data)

    def bw(g):
        out = []
        if la:
            out.append((a, _unbroadcast(g / bv, a.shape)))
        if lb:
            out.append((b, _unbroadcast(-g * av / (bv * bv), b.shape)))
        return out

    return _make(data, tuple(t for t in (a, b) if _live(t)), bw)


def neg(a) -> Tensor:
    if not _live(a):
        return Tensor(-_val(a))
    return _make(-a.data, (a,), lambda g: [(a, -g)])


def power(a, p) -> Tensor:
    if isinstance(p, Tensor):
        raise TypeError("op pow: exponent must be a constant")
    av = _val(a)
    data = av ** p
    if not _live(a):
        return Tensor(data)
    return _make(data, (a,), lambda g: [(a, g * p * av ** (p - 1))])


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    try:
        data = np.matmul(av, bv)
    except ValueError as e:
        raise ShapeError(f"op matmul: {np.shape(av)} @ {np.shape(bv)}") from e
    la, lb = _live(a), _live(b)
    if not (la or lb):
        return Tensor(data)
    if av.ndim == 1 or bv.ndim == 1:
        raise ShapeError("op matmul: 1-d operands unsupported, reshape explicitly")

    def bw(g):
        out = []
        if la:
            out.append((a, _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)))
        if lb:
            out.append((b, _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)))
        return out

    return _make(data, tuple(t for t in (a, b) if _live(t)), bw)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum; every index of each operand must appear in the
    output or in the other operand (no internal traces)."""
    av, bv = _val(a), _val(b)
    ins, outs = spec.split("->")
    sa, sb = ins.split(",")
    if not (set(sa) <= set(outs) | set(sb) and set(sb) <= set(outs) | set(sa)):
        raise ShapeError(f"op einsum: unsupported spec {spec}")
    try:
        data = np.einsum(spec, av, bv, optimize=True)
    except ValueError as e:
        raise ShapeError(f"op einsum {spec}: {np.shape(av)}, {np.shape(bv)}") from e
    la, lb = _live(a), _live(b)
    if not (la or lb):
        return Tensor(data)

    def bw(g):
        out = []
        if la:
            out.append((a, np.einsum(f"{outs},{sb}->{sa}", g, bv, optimize=True)))
        if lb:
            out.append((b, np.einsum(f"{outs},{sa}->{sb}", g, av, optimize=True)))
        return out

    return _make(data, tuple(t for t in (a, b) if _live(t)), bw)


# -- elementwise nonlinearities ---------------------------------------------------

def _unary(a, data, dfn):
    if not _live(a):
        return Tensor(data)
    return _make(data, (a,), lambda g: [(a, g * dfn())])


def sin(a):
    av = _val(a)
    return _unary(a, np.sin(av), lambda: np.cos(av))


def cos(a):
    av = _val(a)
    return _unary(a, np.cos(av), lambda: -np.sin(av))


def exp(a):
    out = np.exp(_val(a))
    return _unary(a, out, lambda: out)


def log(a):
    av = _val(a)
    return _unary(a, np.log(av), lambda: 1.0 / av)


def sqrt(a):
    out = np.sqrt(_val(a))
    return _unary(a, out, lambda: 0.5 / out)


def tanh(a):
    out = np.tanh(_val(a))
    return _unary(a, out, lambda: 1.0 - out * out)


def sigmoid(a):
    av = _val(a)
    out = 1.0 / (1.0 + np.exp(-av))
    return _unary(a, out, lambda: out * (1.0 - out))


def relu(a):
    av = _val(a)
    return _unary(a, np.maximum(av, 0.0), lambda: (av > 0).astype(av.dtype))


def leaky_relu(a, slope: float = 0.2):
    av = _val(a)
    return _unary(a, np.where(av > 0, av, slope * av),
                  lambda: np.where(av > 0, 1.0, slope).astype(av.dtype))


def tabs(a):
    av = _val(a)
    return _unary(a, np.abs(av), lambda: np.sign(av))


def clamp(a, lo=None, hi=None):
    av = _val(a)
    data = np.clip(av, lo, hi)

    def dfn():
        inside = np.ones_like(av)
        if lo is not None:
            inside = inside * (av >= lo)
        if hi is not None:
            inside = inside * (av <= hi)
        return inside

    return _unary(a, data, dfn)


# -- reductions ----------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    av = _val(a)
    data = av.sum(axis=axis, keepdims=keepdims)
    if not _live(a):
        return Tensor(data)
    shape = av.shape

    def bw(g):
        if axis is None:
            return [(a, np.broadcast_to(g, shape))]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg, shape))]

    return _make(data, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    av = _val(a)
    if axis is None:
        n = av.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([av.shape[i] for i in ax]))
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def amax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; gradient splits evenly across tied argmax entries."""
    av = _val(a)
    data = av.max(axis=axis, keepdims=keepdims)
    if not _live(a):
        return Tensor(data)

    def bw(g):
        full = data if (keepdims or axis is None) else np.expand_dims(data, axis)
        mask = (av == full)
        cnt = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        gg = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        return [(a, mask * gg / cnt)]

    return _make(data, (a,), bw)


# -- shape ops ----------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    av = _val(a)
    data = av.reshape(shape)
    if not _live(a):
        return Tensor(data)
    orig = av.shape
    return _make(data, (a,), lambda g: [(a, g.reshape(orig))])


def transpose(a, axes=None) -> Tensor:
    av = _val(a)
    data = av.transpose(axes)
    if not _live(a):
        return Tensor(data)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(data, (a,), lambda g: [(a, g.transpose(inv))])


def concat(tensors, axis=0) -> Tensor:
    data = np.concatenate([_val(t) for t in tensors], axis=axis)
    live = [t for t in tensors if _live(t)]
    if not live:
        return Tensor(data)
    sizes = [np.shape(_val(t))[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if _live(t):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                out.append((t, g[tuple(idx)]))
        return out

    return _make(data, tuple(live), bw)


def stack(tensors, axis=0) -> Tensor:
    data = np.stack([_val(t) for t in tensors], axis=axis)
    live = [t for t in tensors if _live(t)]
    if not live:
        return Tensor(data)

    def bw(g):
        return [(t, np.take(g, i, axis=axis)) for i, t in enumerate(tensors) if _live(t)]

    return _make(data, tuple(live), bw)


def tslice(a, key) -> Tensor:
    av = _val(a)
    data = av[key]
    if not _live(a):
        return Tensor(data)
    shape = av.shape

    def bw(g):
        buf = np.zeros(shape, dtype=g.dtype)
        np.add.at(buf, key, g)
        return [(a, buf)]

    return _make(data, (a,), bw)


def pad2d(a, padding: int) -> Tensor:
    """Zero-pad the last two axes symmetrically."""
    if padding == 0:
        return a if isinstance(a, Tensor) else Tensor(a)
    av = _val(a)
    pw = [(0, 0)] * (av.ndim - 2) + [(padding, padding)] * 2
    data = np.pad(av, pw)
    if not _live(a):
        return Tensor(data)
    sl = tuple([slice(None)] * (av.ndim - 2) + [slice(padding, -padding)] * 2)
    return _make(data, (a,), lambda g: [(a, g[sl])])


# -- indexing ops --------------------------------------------------------------------

def gather(a, idx, axis=0) -> Tensor:
    """Take slices by an integer index array along one axis."""
    av = _val(a)
    idx = np.asarray(idx)
    data = np.take(av, idx, axis=axis)
    if not _live(a):
        return Tensor(data)
    shape = av.shape

    def bw(g):
        buf = np.zeros(shape, dtype=g.dtype)
        if axis == 0:
            np.add.at(buf, idx, g)
        else:
            np.add.at(buf, (slice(None),) * axis + (idx,), g)
        return [(a, buf)]

    return _make(data, (a,), bw)


def take_pairs(a, rows, cols) -> Tensor:
    """out[i...] = a[rows[i...], cols[i...]]."""
    av = _val(a)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    data = av[rows, cols]
    if not _live(a):
        return Tensor(data)
    shape = av.shape

    def bw(g):
        buf = np.zeros(shape, dtype=g.dtype)
        np.add.at(buf, (rows, cols), g)
        return [(a, buf)]

    return _make(data, (a,), bw)


def index_add(shape, idx, values) -> Tensor:
    """Scatter-add `values` rows into a zero tensor of `shape` (axis 0)."""
    vv = _val(values)
    idx = np.asarray(idx)
    data = np.zeros(shape, dtype=vv.dtype)
    np.add.at(data, idx, vv)
    if not _live(values):
        return Tensor(data)
    return _make(data, (values,), lambda g: [(values, g[idx])])


def scatter_write(base: np.ndarray, flat_idx: np.ndarray, values) -> Tensor:
    """Place `values` at flat positions of a constant base array.

    flat_idx must have the same shape as values; the base carries no
    gradient, only the written values do.
    """
    vv = _val(values)
    flat_idx = np.asarray(flat_idx)
    if flat_idx.shape != vv.shape:
        raise ShapeError(f"op scatter_write: index shape {flat_idx.shape} != values {vv.shape}")
    data = np.array(base, dtype=vv.dtype, copy=True)
    data.reshape(-1)[flat_idx] = vv
    if not _live(values):
        return Tensor(data)
    return _make(data, (values,), lambda g: [(values, g.reshape(-1)[flat_idx])])


# -- composites -------------------------------------------------------------------------

def softmax(a, axis=-1) -> Tensor:
    shift = _val(a).max(axis=axis, keepdims=True)
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def group_norm(x, num_groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """GroupNorm over (S, C, H, W) with per-channel affine."""
    s, c, h, w = x.shape
    if c % num_groups:
        raise ShapeError(f"op group_norm: channels {c} not divisible by {num_groups} groups")
    xg = reshape(x, (s, num_groups, (c // num_groups) * h * w))
    mu = tmean(xg, axis=2, keepdims=True)
    xc = sub(xg, mu)
    var = tmean(mul(xc, xc), axis=2, keepdims=True)
    y = div(xc, sqrt(add(var, eps)))
    y = reshape(y, (s, c, h, w))
    return add(mul(y, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    return add(mul(div(xc, sqrt(add(var, eps))), gamma), beta)


def dot_last(a, b) -> Tensor:
    return tsum(mul(a, b), axis=-1)


def norm_last(a, eps: float = 0.0) -> Tensor:
    q = tsum(mul(a, a), axis=-1)
    return sqrt(add(q, eps) if eps else q)


def cross3(a, b) -> Tensor:
    """Cross product over the last axis (size 3)."""
    ax, ay, az = tslice(a, (..., 0)), tslice(a, (..., 1)), tslice(a, (..., 2))
    bx, by, bz = tslice(b, (..., 0)), tslice(b, (..., 1)), tslice(b, (..., 2))
    return stack([
        sub(mul(ay, bz), mul(az, by)),
        sub(mul(az, bx), mul(ax, bz)),
        sub(mul(ax, by), mul(ay, bx)),
    ], axis=-1)


def bilinear_sample(img, u, v):
    """Sample img (H, W, C) at continuous pixel coords; zero outside borders.

    u is the column coordinate, v the row coordinate.  Gradients flow into
    u and v (and img if it participates).
    """
    img = as_tensor(img)
    h, w = img.shape[0], img.shape[1]
    uv, vv = _val(u), _val(v)
    u0 = np.floor(uv).astype(np.int64)
    v0 = np.floor(vv).astype(np.int64)
    fu = sub(u, u0.astype(img.dtype))
    fv = sub(v, v0.astype(img.dtype))
    one = np.asarray(1.0, dtype=img.dtype)
    flat = reshape(img, (h * w, img.shape[2]))
    out = None
    for dv, du, wgt in (
        (0, 0, mul(sub(one, fv), sub(one, fu))),
        (0, 1, mul(sub(one, fv), fu)),
        (1, 0, mul(fv, sub(one, fu))),
        (1, 1, mul(fv, fu)),
    ):
        vi, ui = v0 + dv, u0 + du
        inside = ((vi >= 0) & (vi < h) & (ui >= 0) & (ui < w)).astype(img.dtype)
        vi_c, ui_c = np.clip(vi, 0, h - 1), np.clip(ui, 0, w - 1)
        corner = gather(flat, vi_c * w + ui_c, axis=0)
        wcol = reshape(mul(wgt, inside), wgt.shape + (1,))
        term = mul(corner, wcol)
        out = term if out is None else add(out, term)
    return out


# -- operator bindings ----------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__pow__ = lambda self, p: power(self, p)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__getitem__ = lambda self, key: tslice(self, key)
