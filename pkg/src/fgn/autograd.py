"""A small reverse-mode autodiff tape over numpy arrays.

Only the operations the network needs are provided.  Every op records a
closure mapping the upstream gradient to one gradient per parent; calling
:func:`backward` on a scalar walks the graph in reverse topological order.
Inside :func:`no_grad` ops skip graph construction entirely.
"""

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class NonFiniteError(ValueError):
    """A score or activation that must be finite is not."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _pair(a, b):
    """Tensor-ify two operands; bare constants adopt the other operand's float dtype."""
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        b2, a2 = _pair(b, a)
        return a2, b2
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = np.asarray(b)
        if a.dtype.kind == "f" and b.dtype != a.dtype and b.dtype.kind in "fiub":
            b = b.astype(a.dtype)
        b = Tensor(b)
    return a, b


def _make(data, parents, backward):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data) if grad is None else grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise


def sigmoid_np(x):
    """Overflow-free logistic function on arrays."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.result_type(x, np.float32))


def add(a, b):
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, p):
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    out = sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# shape / reduction


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), bw)


def sorted_mean(a, axis=0):
    """Mean along ``axis`` that is bit-identical under any permutation of that axis.

    Values are summed in sorted order; the gradient is the plain mean's.
    """
    n = a.shape[axis]
    if n == 0:
        raise ValueError("mean over an empty axis")
    out = np.sort(a.data, axis=axis).sum(axis=axis) / n
    return _make(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),))


def getitem(a, idx):
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.squeeze(s, axis) for s in np.split(g, n, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra / convolution


def matmul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None):
    """Affine map over the last axis: ``x @ w + b``; ``w`` is (in, out)."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def conv2d(x, w, b=None):
    """Stride-1 'same' convolution on (B, H, W, Cin) with w of (kh, kw, Cin, Cout)."""
    kh, kw, cin, cout = w.shape
    B, H, W, C = x.shape
    if C != cin:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {cin}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B,H,W,C,kh,kw
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if b is not None:
        out += b.data
    out = out.reshape(B, H, W, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, H, W, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + H, j:j + W, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, ph:ph + H, pw:pw + W, :]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def roi_align(feat, boxes, spatial_scale, out_h, out_w, sampling=2):
    """RoIAlign of a single (H, W, C) map; gradients flow to the map only."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    H, W, _ = feat.shape
    out = kernels.roi_align_forward(feat.data, boxes, spatial_scale, out_h, out_w, sampling)

    def bw(g):
        return (kernels.roi_align_backward(g, boxes, spatial_scale, H, W, sampling),)

    return _make(out, (feat,), bw)


# ---------------------------------------------------------------------------
# losses


def logsumexp(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * e / s,))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of (R, K) logits against integer labels (R,)."""
    labels = np.asarray(labels, dtype=np.int64)
    R = logits.shape[0]
    if R == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(R)
    loss = -np.log(p[rows, labels]).mean()

    def bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (g * d / R,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def bce_with_logits(logits, targets, reduce="mean"):
    t = np.asarray(targets, dtype=logits.dtype)
    x = logits.data
    if x.size == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    elt = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size if reduce == "mean" else 1
    sig = sigmoid_np(x)
    return _make(np.asarray(elt.sum() / n, dtype=x.dtype), (logits,),
                 lambda g: (g * (sig - t) / n,))


def smooth_l1(diff, beta=1.0 / 9.0):
    """Elementwise Huber-style penalty, summed."""
    d = diff.data
    ad = np.abs(d)
    small = ad < beta
    elt = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(small, d / beta, np.sign(d))
    return _make(np.asarray(elt.sum(), dtype=d.dtype), (diff,), lambda g: (g * grad,))
