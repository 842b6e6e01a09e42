"""Dense tensors with reverse-mode gradients.

Small, single-threaded substrate: each operation records its parents and a
closure that routes the output gradient back to them.  Training runs in
float32 by default; switch to float64 ("verification mode") for
finite-difference checks, where float32 rounding would drown the tolerance.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError

_DTYPES = {"f32": np.float32, "f64": np.float64}

_default_dtype = _DTYPES.get(os.environ.get("TRX_PRECISION", "f32"), np.float32)
_grad_enabled = True


def set_precision(mode):
    """Set the default dtype for new tensors; mode is 'f32' or 'f64'."""
    global _default_dtype
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}; expected 'f32' or 'f64'")
    _default_dtype = _DTYPES[mode]


def precision():
    return "f64" if _default_dtype == np.float64 else "f32"


@contextmanager
def use_precision(mode):
    old = precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


@contextmanager
def no_grad():
    """Disable graph recording (evaluation / analytics paths)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    """N-d array plus an optional gradient and the edge into the graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backprop = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return self.data.copy()

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Accumulate dself/dleaf into .grad for every tracked leaf.

        Additive: a second call on a fresh graph adds on top of existing
        gradients, which is what gradient accumulation across episodes needs.
        """
        if self.data.shape != ():
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backprop is not None:
                node._backprop(node.grad)
                # clear interior buffers so a repeat call stays additive
                node.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _result(data, parents, backprop):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    out._parents = tuple(p for p in parents if p.requires_grad) if tracked else ()
    out._backprop = backprop if tracked else None
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backprop(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backprop)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backprop(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), backprop)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backprop(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backprop)


def neg(a):
    a = as_tensor(a)

    def backprop(g):
        a._accumulate(-g)

    return _result(-a.data, (a,), backprop)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def backprop(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), backprop)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes do not conform: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def backprop(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(data, (a, b), backprop)


def transpose(a):
    a = as_tensor(a)

    def backprop(g):
        a._accumulate(g.T)

    return _result(a.data.T, (a,), backprop)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def backprop(g):
        a._accumulate(g.reshape(old))

    return _result(a.data.reshape(shape), (a,), backprop)


def take_rows(a, idx):
    """Select rows along axis 0; repeated indices accumulate on backward."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def backprop(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _result(a.data[idx], (a,), backprop)


def stack(tensors):
    """Stack same-shape tensors along a new leading axis."""
    ts = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in ts])

    def backprop(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(g[i])

    return _result(data, tuple(ts), backprop)


def tsum(a, axis=None):
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def backprop(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _result(data, (a,), backprop)


def tmean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def square(a):
    a = as_tensor(a)

    def backprop(g):
        a._accumulate(g * (2.0 * a.data))

    return _result(a.data * a.data, (a,), backprop)


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backprop(g):
        # subgradient 0 at the origin keeps zero distances from poisoning grads
        safe = np.where(data > 0, data, 1.0)
        a._accumulate(g * np.where(data > 0, 0.5 / safe, 0.0))

    return _result(data, (a,), backprop)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backprop(g):
        a._accumulate(g * mask)

    return _result(a.data * mask, (a,), backprop)


def linear_map(x, w, b):
    """w @ x + b for a vector x, or x @ w.T + b row-wise for a 2-d batch.

    w has shape (n_out, n_in), b has shape (n_out,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[1] or b.data.shape != (w.data.shape[0],):
        raise DimensionError(
            f"linear_map shapes do not conform: x {x.data.shape}, W {w.data.shape}, b {b.data.shape}"
        )
    data = x.data @ w.data.T + b.data

    def backprop(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            if g.ndim == 1:
                w._accumulate(np.outer(g, x.data))
            else:
                w._accumulate(g.T @ x.data)
        if b.requires_grad:
            b._accumulate(g if g.ndim == 1 else g.sum(axis=0))

    return _result(data, (x, w, b), backprop)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit population variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} do not match feature dim {d}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gain.data * xhat + bias.data

    def backprop(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gg = g * gain.data
            term = gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv)

    return _result(data, (x, gain, bias), backprop)


def scaled_softmax(scores, scale=1.0):
    """softmax(scores / scale) along the last axis, max-subtracted for stability."""
    scores = as_tensor(scores)
    if scale <= 0:
        raise ValueError("softmax scale must be positive")
    z = scores.data / scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def backprop(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        scores._accumulate(data * (g - inner) / scale)

    return _result(data, (scores,), backprop)


def cross_entropy_from_distances(distances, true_class):
    """-log softmax(-distances)[true_class]; distances is a 1-d tensor."""
    distances = as_tensor(distances)
    d = distances.data
    if d.ndim != 1 or d.shape[0] < 2:
        raise ValueError(f"distances must be a vector of at least 2 entries, got shape {d.shape}")
    c = int(true_class)
    if not 0 <= c < d.shape[0]:
        raise ValueError(f"true_class {c} out of range for {d.shape[0]} classes")
    z = -d
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    p = np.exp(z - lse)
    # loss = d_c + logsumexp(-d)
    data = np.asarray(d[c] + lse, dtype=d.dtype).reshape(())

    def backprop(g):
        onehot = np.zeros_like(d)
        onehot[c] = 1.0
        distances._accumulate(g * (onehot - p))

    return _result(data, (distances,), backprop)


class ParameterStore:
    """Named trainable tensors plus their accumulated-gradient bookkeeping."""

    def __init__(self):
        self._params = {}
        self.step_count = 0
        self.accum_count = 0

    def register(self, name, tensor):
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def grad(self, name):
        t = self._params[name]
        return t.grad if t.grad is not None else np.zeros_like(t.data)

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None
        self.accum_count = 0

    def checksum(self):
        return float(sum(np.abs(t.data).sum() for t in self._params.values()))


def backward(loss, store=None):
    """Backpropagate a scalar loss, accumulating into parameter gradients."""
    loss.backward()
    if store is not None:
        store.accum_count += 1


def sgd_step(store, lr):
    """theta <- theta - lr * (accumulated grad / accumulation count), then reset."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    n = max(store.accum_count, 1)
    inv = float(lr) / n
    for t in store._params.values():
        if t.grad is not None:
            t.data -= inv * t.grad
            t.grad = None
    store.accum_count = 0
    store.step_count += 1
