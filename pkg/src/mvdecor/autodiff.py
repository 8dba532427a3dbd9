"""Small reverse-mode autodiff engine over numpy arrays.

Image tensors use channels-last layout ``(N, H, W, C)`` so that convolutions
reduce to contiguous matrix products over the channel axis.
"""
import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        backward(self)


def _wrap(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, fn):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=fn)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss):
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    Raises if the same graph is walked twice; build a new forward pass instead.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {loss.shape}")
    if loss._done:
        raise RuntimeError("backward already called on this graph")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            # leaf
            if g is not None:
                _accum(node, g)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    loss._done = True


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), fn)


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out = a.data * b.data

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), fn)


def relu(x):
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def exp(x):
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x):
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _node(np.asarray(out, dtype=x.dtype), (x,), fn)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), np.asarray(1.0 / n, dtype=x.dtype))


def logsumexp(x, axis=-1):
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)

    def fn(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _node(out, (x,), fn)


def softmax(x, axis=-1):
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _node(y, (x,), fn)


def l2_normalize(x, axis=-1, eps=1e-8):
    """Scale vectors along ``axis`` to unit length.

    Returns ``(y, valid)``. Vectors with norm below ``eps`` map to zero and
    are marked invalid so callers can drop them from losses.
    """
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    valid = n >= eps
    safe = np.where(valid, n, 1).astype(x.dtype, copy=False)
    y = np.where(valid, x.data / safe, 0).astype(x.dtype, copy=False)

    def fn(g):
        gx = (g - y * np.sum(g * y, axis=axis, keepdims=True)) / safe
        return (np.where(valid, gx, 0),)

    return _node(y, (x,), fn), np.squeeze(valid, axis)


# ---------------------------------------------------------------- shape / linear

def reshape(x, shape):
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    out = x.data[idx]

    def fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (x,), fn)


def take_rows(x, rows):
    """Gather rows of a 2-D tensor; faster backward than generic indexing."""
    rows = np.asarray(rows, dtype=np.intp)
    out = x.data[rows]

    def fn(g):
        gx = np.zeros_like(x.data)
        # column-wise bincount is much faster than np.add.at for row scatter
        for c in range(x.shape[1]):
            gx[:, c] = np.bincount(rows, weights=g[:, c], minlength=x.shape[0])
        return (gx,)

    return _node(out, (x,), fn)


def concat(xs, axis=0):
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _node(out, tuple(xs), fn)


def matmul(a, b):
    out = a.data @ b.data

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), fn)


# ---------------------------------------------------------------- image ops

def conv2d(x, w, b=None, stride=1):
    """Same-padded 2-D convolution.

    x: (N, H, W, C); w: (k, k, C, O) with odd k; b: (O,). Stride 1 or 2.
    """
    k = w.shape[0]
    if w.shape[1] != k or k % 2 != 1:
        raise ValueError(f"square odd kernel required, got {w.shape[:2]}")
    if x.shape[-1] != w.shape[2]:
        raise ValueError(f"channel mismatch: input {x.shape[-1]}, kernel {w.shape[2]}")
    if k == 1:
        out = x.data @ w.data[0, 0]
        if b is not None:
            out = out + b.data

        def fn1(g):
            gx = g @ w.data[0, 0].T if x.requires_grad else None
            gw = (x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))[None, None]
            gb = g.reshape(-1, g.shape[-1]).sum(0) if b is not None else None
            return gx, gw, gb

        parents = (x, w) if b is None else (x, w, b)
        return _node(out, parents, lambda g: fn1(g)[: len(parents)])
    if stride == 1:
        out, fn = _conv_s1(x, w)
    elif stride == 2:
        out, fn = _conv_s2(x, w)
    else:
        raise ValueError(f"unsupported stride {stride}")
    if b is None:
        return _node(out, (x, w), lambda g: fn(g))
    out += b.data

    def fnb(g):
        gx, gw = fn(g)
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(0)

    return _node(out, (x, w, b), fnb)


def _conv_s1(x, w):
    # Flatten the padded batch; a kernel tap (i, j) is then a constant
    # offset into the flat array, so every tap is one contiguous matmul.
    N, H, W, C = x.shape
    k, O = w.shape[0], w.shape[3]
    p = k // 2
    Hp, Wp = H + 2 * p, W + 2 * p
    xp = np.zeros((N, Hp, Wp, C), dtype=x.dtype)
    xp[:, p:p + H, p:p + W] = x.data
    flat = xp.reshape(-1, C)
    L = flat.shape[0]
    span = L - (k - 1) * (Wp + 1)
    acc = np.zeros((L, O), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            off = i * Wp + j
            acc[:span] += flat[off:off + span] @ w.data[i, j]
    out = np.ascontiguousarray(acc.reshape(N, Hp, Wp, O)[:, :H, :W])

    def fn(g):
        gfull = np.zeros((N, Hp, Wp, O), dtype=g.dtype)
        gfull[:, :H, :W] = g
        gflat = gfull.reshape(-1, O)[:span]
        gw = np.empty_like(w.data)
        gxf = np.zeros((L, C), dtype=x.dtype) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                off = i * Wp + j
                gw[i, j] = flat[off:off + span].T @ gflat
                if gxf is not None:
                    gxf[off:off + span] += gflat @ w.data[i, j].T
        gx = None
        if gxf is not None:
            gx = gxf.reshape(N, Hp, Wp, C)[:, p:p + H, p:p + W]
        return gx, gw

    return out, fn


def _conv_s2(x, w):
    N, H, W, C = x.shape
    k, O = w.shape[0], w.shape[3]
    p = k // 2
    Ho, Wo = (H + 2 * p - k) // 2 + 1, (W + 2 * p - k) // 2 + 1
    xp = np.zeros((N, H + 2 * p, W + 2 * p, C), dtype=x.dtype)
    xp[:, p:p + H, p:p + W] = x.data
    cols = np.empty((N, Ho, Wo, k, k, C), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i:i + 2 * Ho:2, j:j + 2 * Wo:2]
    cols = cols.reshape(-1, k * k * C)
    wm = w.data.reshape(k * k * C, O)
    out = (cols @ wm).reshape(N, Ho, Wo, O)

    def fn(g):
        gm = g.reshape(-1, O)
        gw = (cols.T @ gm).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gc = (gm @ wm.T).reshape(N, Ho, Wo, k, k, C)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + 2 * Ho:2, j:j + 2 * Wo:2] += gc[:, :, :, i, j]
            gx = gxp[:, p:p + H, p:p + W]
        return gx, gw

    return out, fn


def _up_axis(a, axis):
    n = a.shape[axis]
    prev = np.take(a, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(a, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape).astype(a.dtype, copy=False)


def _up_axis_T(g, axis):
    n2 = g.shape[axis]
    n = n2 // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g2 = g.reshape(shape)
    ge = np.take(g2, 0, axis=axis + 1)
    go = np.take(g2, 1, axis=axis + 1)
    out = 0.75 * (ge + go)
    sl = [slice(None)] * g.ndim
    # prev neighbour of i is i-1 (clamped at 0)
    lo = list(sl)
    lo[axis] = slice(0, n - 1)
    hi = list(sl)
    hi[axis] = slice(1, n)
    out[tuple(lo)] += 0.25 * np.take(ge, np.arange(1, n), axis=axis)
    out[tuple(hi)] += 0.25 * np.take(go, np.arange(0, n - 1), axis=axis)
    first = list(sl)
    first[axis] = slice(0, 1)
    last = list(sl)
    last[axis] = slice(n - 1, n)
    out[tuple(first)] += 0.25 * np.take(ge, [0], axis=axis)
    out[tuple(last)] += 0.25 * np.take(go, [n - 1], axis=axis)
    return out.astype(g.dtype, copy=False)


def upsample2x(x):
    """Bilinear x2 upsampling of (N, H, W, C), half-pixel centers."""
    out = _up_axis(_up_axis(x.data, 1), 2)

    def fn(g):
        return (_up_axis_T(_up_axis_T(g, 2), 1),)

    return _node(out, (x,), fn)
