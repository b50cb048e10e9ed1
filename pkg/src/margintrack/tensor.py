"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ndarray and remembers how it was produced.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates gradients into the leaves that asked for
them.  Only the primitives needed by small dense / convolutional classifiers
are provided.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class GraphConsumed(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

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
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self, retain_graph=False):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        grads = _backprop(self, retain_graph)
        for leaf, g in grads.values():
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _topo_order(root):
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


def _backprop(root, retain_graph):
    """Return {id(leaf): (leaf, grad)} for leaves reachable from scalar ``root``."""
    if root.data.size != 1:
        raise NotScalar(f"backward needs a scalar output, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    for node in order:
        if node._consumed:
            raise GraphConsumed("graph already used by backward(); pass retain_graph=True")
    pending = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[id(node)] = (node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    if not retain_graph:
        for node in order:
            if not node.is_leaf:
                node._consumed = True
                node._backward = None
    return leaves


def grad(output, inputs, retain_graph=False):
    """Gradients of scalar ``output`` w.r.t. each tensor in ``inputs``.

    Leaves that are not reachable get an all-zero gradient.  ``.grad`` fields
    are left untouched.
    """
    leaves = _backprop(output, retain_graph)
    out = []
    for t in inputs:
        hit = leaves.get(id(t))
        out.append(hit[1] if hit is not None else np.zeros_like(t.data))
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), backward, "add")


def add_bias(x, b):
    """Add a per-feature bias: trailing axis for 2-D inputs, channel axis for 4-D."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1:
        raise ShapeMismatch(f"bias must be 1-D, got {b.shape}")
    if x.ndim == 4:
        if x.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"bias {b.shape} vs channels of {x.shape}")
        bd = b.data[None, :, None, None]
        axes = (0, 2, 3)
    else:
        if x.shape[-1] != b.shape[0]:
            raise ShapeMismatch(f"bias {b.shape} vs features of {x.shape}")
        bd = b.data
        axes = tuple(range(x.ndim - 1))

    def backward(g):
        return (g if x.requires_grad else None,
                g.sum(axis=axes) if b.requires_grad else None)

    return _make(x.data + bd, (x, b), backward, "add_bias")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), backward, "mul")


def tsum(a, axis=None):
    a = as_tensor(a)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def flatten(a):
    """Collapse every axis but the leading (batch) one."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def index(a, key):
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.asarray(a.data[key]), (a,), backward, "index")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), backward, "relu")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def backward(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, w, b=None):
    """``x @ w.T + b`` with ``w`` stored as (out_features, in_features)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {w.shape}")
    out = x.data @ w.data.T
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"linear: bias {b.shape} vs weight {w.shape}")
        out = out + b.data
        parents = (x, w, b)

    def backward(g):
        grads = [g @ w.data if x.requires_grad else None,
                 g.T @ x.data if w.requires_grad else None]
        if b is not None:
            grads.append(g.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, backward, "linear")


def _pad_amounts(kernel, padding):
    if padding == "valid":
        return 0, 0
    if padding == "same":
        lo = (kernel - 1) // 2
        return lo, kernel - 1 - lo
    raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")


def conv2d(x, w, b=None, padding="valid"):
    """Stride-1 cross-correlation. ``x``: (N, C, H, W), ``w``: (F, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs kernel {w.shape}")
    _, _, kh, kw = w.shape
    ph, pw = _pad_amounts(kh, padding), _pad_amounts(kw, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), ph, pw))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeMismatch(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    out = np.einsum("nchwij,fcij->nfhw", win, w.data, optimize=True)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"conv2d: bias {b.shape} vs kernel {w.shape}")
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    ho, wo = out.shape[2], out.shape[3]

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += np.einsum(
                        "nfhw,fc->nchw", g, w.data[:, :, i, j], optimize=True)
            gx = gxp[:, :, ph[0]:ph[0] + x.shape[2], pw[0]:pw[0] + x.shape[3]]
        if w.requires_grad:
            gw = np.einsum("nchwij,nfhw->fcij", win, g, optimize=True)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


def maxpool2d(x, size=2):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects (N, C, H, W), got {x.shape}")
    n, c, h, wd = x.shape
    ho, wo = h // size, wd // size
    if ho == 0 or wo == 0:
        raise ShapeMismatch(f"maxpool2d: window {size} larger than input {x.shape}")
    crop = x.data[:, :, :ho * size, :wo * size]
    win = crop.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gc = gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * size, :wo * size] = gc
        return (gx,)

    return _make(out, (x,), backward, "maxpool2d")


# ---------------------------------------------------------------------------
# probabilities and loss


def _softmax_np(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    a = as_tensor(a)
    p = _softmax_np(a.data, axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood.  ``logits`` is (c,) with an int label, or (N, c) with N labels."""
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects 1-D or 2-D logits, got {logits.shape}")
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape != (z.shape[0],):
        raise ShapeMismatch(f"{lab.shape[0]} labels for {z.shape[0]} rows of logits")
    if lab.size and (lab.min() < 0 or lab.max() >= z.shape[1]):
        raise ShapeMismatch(f"label out of range for {z.shape[1]} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = lse - shifted[rows, lab]
    n = z.shape[0]

    def backward(g):
        d = _softmax_np(z, axis=1)
        d[rows, lab] -= 1.0
        d *= g / n
        return (d[0] if single else d,)

    return _make(np.asarray(nll.mean()), (logits,), backward, "cross_entropy")
