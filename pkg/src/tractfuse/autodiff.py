"""Reverse-mode autodiff on dense numpy arrays.

Small tape-based engine: every op records its parents and a backward
closure, `Tensor.backward` runs a topological sweep. float32 is the
working precision; pass float64 arrays to run the whole graph in double
(used by the gradient-check suite).
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (cheap inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_backward_run")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._grad_fn = None
        self._backward_run = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents, grad_fn):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._backward_run = False
        if _GRAD_ENABLED and any(p.requires_grad or p._grad_fn is not None for p in parents):
            out.requires_grad = False
            out._parents = parents
            out._grad_fn = grad_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._grad_fn = None
        return out

    @staticmethod
    def as_tensor(x, dtype=None):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))

    def detach(self):
        return Tensor(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- backward -------------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate gradients into every reachable leaf with requires_grad."""
        if self._backward_run:
            raise RuntimeError("backward already run on this recording")
        self._backward_run = True
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without explicit grad requires a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._grad_fn is None:
                continue
            for p, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = Tensor.as_tensor(other, dtype=self.dtype)
        a, b = self, other
        out = np.add(a.data, b.data)
        return Tensor._make(out, (a, b), lambda g: (
            _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-Tensor.as_tensor(other, dtype=self.dtype))

    def __rsub__(self, other):
        return Tensor.as_tensor(other, dtype=self.dtype) + (-self)

    def __mul__(self, other):
        other = Tensor.as_tensor(other, dtype=self.dtype)
        a, b = self, other
        out = np.multiply(a.data, b.data)
        return Tensor._make(out, (a, b), lambda g: (
            _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor.as_tensor(other, dtype=self.dtype)
        a, b = self, other
        out = np.divide(a.data, b.data)
        return Tensor._make(out, (a, b), lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    def __pow__(self, p):
        a = self
        out = np.power(a.data, p)
        return Tensor._make(out, (a,), lambda g: (g * p * np.power(a.data, p - 1),))

    def __matmul__(self, other):
        other = Tensor.as_tensor(other, dtype=self.dtype)
        a, b = self, other
        out = np.matmul(a.data, b.data)

        def grad_fn(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if a.data.ndim == 1:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

        return Tensor._make(out, (a, b), grad_fn)

    def __getitem__(self, idx):
        a = self
        out = a.data[idx]
        if isinstance(out, np.ndarray):
            out = out.copy()
        else:
            out = np.asarray(out)

        def grad_fn(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            return (ga,)

        return Tensor._make(out, (a,), grad_fn)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def swapaxes(self, ax1, ax2):
        a = self
        return Tensor._make(np.swapaxes(a.data, ax1, ax2).copy(), (a,),
                            lambda g: (np.swapaxes(g, ax1, ax2),))

    def sum(self, axis=None, keepdims=False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.data.shape).copy(),)

        return Tensor._make(np.asarray(out), (a,), grad_fn)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


# -- elementwise primitives ---------------------------------------------------

def relu(x):
    x = Tensor.as_tensor(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def tanh(x):
    x = Tensor.as_tensor(x)
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * (1 - y * y),))


def exp(x):
    x = Tensor.as_tensor(x)
    y = np.exp(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y,))


def log(x):
    x = Tensor.as_tensor(x)
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = Tensor.as_tensor(x)
    y = np.sqrt(x.data)
    return Tensor._make(y, (x,), lambda g: (g * 0.5 / y,))


def minimum(a, b):
    a, b = Tensor.as_tensor(a), Tensor.as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return Tensor._make(out, (a, b), lambda g: (
        _unbroadcast(g * take_a, a.data.shape),
        _unbroadcast(g * ~take_a, b.data.shape)))


ARCCOS_CLAMP = 1e-6


def arccos_clamped(x, eps=ARCCOS_CLAMP):
    """arccos with the input clamped to [-1+eps, 1-eps] before differentiation."""
    x = Tensor.as_tensor(x)
    lo, hi = -1.0 + eps, 1.0 - eps
    xc = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)
    y = np.arccos(xc)
    return Tensor._make(y, (x,), lambda g: (
        np.where(inside, -g / np.sqrt(1.0 - xc * xc), 0.0),))


def softmax(x, axis=-1):
    x = Tensor.as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(y, (x,), lambda g: (
        y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layernorm(x, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    x = Tensor.as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return Tensor._make(y, (x,), grad_fn)


def concat(tensors, axis=-1):
    tensors = [Tensor.as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(tensors), grad_fn)


def dropout(x, p, rng, training):
    """Inverted dropout; identity when not training or p == 0."""
    x = Tensor.as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p)
    scale = 1.0 / (1.0 - p)
    mask = keep * scale
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))
