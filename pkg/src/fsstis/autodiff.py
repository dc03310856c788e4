"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A `Tensor` wraps an ndarray plus an optional backward closure. Graphs are
built eagerly by the op functions below; `Tensor.backward` runs an iterative
topological sweep, so graph depth is not limited by Python recursion. Ops
only record closures when some input actually requires gradients, which
keeps inference paths allocation-light.

Conventions that downstream code relies on:
  * every op broadcasts like numpy and un-broadcasts gradients by summation;
  * `max_spatial` routes its subgradient to the FIRST maximal element in
    row-major order, matching the argmax convention of the oracles;
  * all data and gradients stay float64.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # keep numpy from absorbing Tensors into object arrays; reflected
    # operators then dispatch back to the Tensor ops
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward on a non-scalar needs an explicit seed gradient")
            grad = np.ones_like(self.data)
        _accumulate(self, np.broadcast_to(np.asarray(grad, dtype=np.float64), self.data.shape))
        for node in reversed(_toposort(self)):
            if node._backward is not None:
                node._backward()

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
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


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = np.array(g) if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g over the axes that numpy broadcasting expanded to reach shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if squeezed:
        g = g.sum(axis=squeezed, keepdims=True)
    return g.reshape(shape)


def make_op(data: np.ndarray, parents, backward) -> Tensor:
    """Assemble an op result; skips closure bookkeeping for constant inputs.

    `backward` is called with the output tensor once its .grad is final and
    must push gradients into the parents via `accumulate`.
    """
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = lambda: backward(out)
    return out


# re-exported for modules that define their own ops (e.g. the spectral pair)
accumulate = _accumulate
unbroadcast = _unbroadcast


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(out.grad, b.shape))

    return make_op(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    return make_op(a.data * b.data, (a, b), bw)


def reciprocal(a: Tensor) -> Tensor:
    a = as_tensor(a)
    inv = 1.0 / a.data

    def bw(out):
        _accumulate(a, -out.grad * inv * inv)

    return make_op(inv, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)

    def bw(out):
        _accumulate(a, out.grad * e)

    return make_op(e, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        _accumulate(a, out.grad / a.data)

    return make_op(np.log(a.data), (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    r = np.sqrt(a.data)

    def bw(out):
        _accumulate(a, out.grad * 0.5 / np.where(r == 0.0, np.inf, r))

    return make_op(r, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    gate = a.data > 0

    def bw(out):
        _accumulate(a, out.grad * gate)

    return make_op(a.data * gate, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(out):
        _accumulate(a, out.grad * s * (1.0 - s))

    return make_op(s, (a,), bw)


def clip_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    a = as_tensor(a)
    gate = a.data > lo

    def bw(out):
        _accumulate(a, out.grad * gate)

    return make_op(np.maximum(a.data, lo), (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes strictly inside the interval."""
    a = as_tensor(a)
    gate = (a.data > lo) & (a.data < hi)

    def bw(out):
        _accumulate(a, out.grad * gate)

    return make_op(np.clip(a.data, lo, hi), (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")

    def bw(out):
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)

    return make_op(a.data @ b.data, (a, b), bw)


def transpose2d(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        _accumulate(a, out.grad.T)

    return make_op(a.data.T, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        _accumulate(a, out.grad.reshape(a.shape))

    return make_op(a.data.reshape(shape), (a,), bw)


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    kshape = _keepdims_shape(a.shape, axis)

    def bw(out):
        _accumulate(a, np.broadcast_to(out.grad.reshape(kshape), a.shape))

    return make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    kshape = _keepdims_shape(a.shape, axis)
    count = a.data.size / np.prod(kshape, dtype=np.float64) if a.data.size else 1.0

    def bw(out):
        _accumulate(a, np.broadcast_to(out.grad.reshape(kshape) / count, a.shape))

    return make_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def max_spatial(a) -> Tensor:
    """Per-channel max over the two trailing spatial axes, kept as (C,1,1).

    Ties send the whole subgradient to the first maximal element in
    row-major order.
    """
    a = as_tensor(a)
    c = a.shape[0]
    flat = a.data.reshape(c, -1)
    idx = flat.argmax(axis=1)
    m = flat[np.arange(c), idx].reshape(c, 1, 1)

    def bw(out):
        gflat = np.zeros_like(flat)
        gflat[np.arange(c), idx] = out.grad.reshape(c)
        _accumulate(a, gflat.reshape(a.shape))

    return make_op(m, (a,), bw)


def take_columns(a, idx) -> Tensor:
    """Column gather on a 2-D tensor; indices are constants."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bw(out):
        g = np.zeros_like(a.data)
        np.add.at(g, (slice(None), idx), out.grad)
        _accumulate(a, g)

    return make_op(a.data[:, idx], (a,), bw)


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        g = out.grad
        _accumulate(a, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return make_op(p, (a,), bw)


def det(a) -> Tensor:
    """Determinant of a square 2-D tensor; gradient is det * inv(a)^T."""
    a = as_tensor(a)
    d = np.linalg.det(a.data)
    inv_t = np.linalg.inv(a.data).T if abs(d) > 1e-300 else None

    def bw(out):
        if inv_t is None:
            raise FloatingPointError("determinant gradient undefined at a singular matrix")
        _accumulate(a, out.grad * d * inv_t)

    return make_op(d, (a,), bw)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) of (Cin,H,W) with (Cout,Cin,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels, kernel expects {cin_w}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    ho, wo = windows.shape[1], windows.shape[2]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out_data = (wmat @ cols).reshape(cout, ho, wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out_data = out_data + b.data.reshape(cout, 1, 1)
        parents.append(b)

    def bw(out):
        g = out.grad.reshape(cout, ho * wo)
        _accumulate(w, (g @ cols.T).reshape(w.shape))
        if b is not None:
            _accumulate(b, g.sum(axis=1))
        if x.requires_grad:
            gcols = (wmat.T @ g).reshape(cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += gcols[:, ki, kj]
            _accumulate(x, gxp[:, padding:padding + h, padding:padding + wid])

    return make_op(out_data, tuple(parents), bw)
