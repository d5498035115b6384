"""Reverse-mode autodiff over dense numpy arrays.

A `Tensor` wraps a contiguous float array and records the operation that
produced it. Calling `backward()` on a scalar result walks the recorded
graph in reverse topological order and accumulates gradients into every
tensor created with `requires_grad=True`.

Only the operations needed by the performance-rendering transformer are
implemented. Every differentiable op registers its name in `OPS` so the
test suite can verify that each one has a finite-difference check.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

# Names of all differentiable ops; the gradient test suite enumerates this.
OPS: list[str] = []


def _register(name):
    OPS.append(name)
    return name


def _sum_to_shape(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    # Leading axes added by broadcasting.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # Axes broadcast from size 1.
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take_slice(self, idx)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# -- elementwise --------------------------------------------------------------

_register("add")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g, b.shape))

    return Tensor._make(a.data + b.data, (a, b), backward)


_register("mul")


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), backward)


_register("square")


def square(a):
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(2.0 * a.data * g)

    return Tensor._make(a.data * a.data, (a,), backward)


_register("exp")


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return Tensor._make(out_data, (a,), backward)


_register("sigmoid")


def sigmoid(a):
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s * (1.0 - s))

    return Tensor._make(s, (a,), backward)


_register("silu")


def silu(a):
    """x * sigmoid(x), the SwiGLU gate nonlinearity."""
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s * (1.0 + a.data * (1.0 - s)))

    return Tensor._make(a.data * s, (a,), backward)


# -- reductions and shape -----------------------------------------------------

_register("sum")


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


_register("mean")


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g / count, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / count, a.shape).copy())

    return Tensor._make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


_register("reshape")


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return Tensor._make(a.data.reshape(shape), (a,), backward)


_register("transpose")


def transpose(a, axes):
    a = _as_tensor(a)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return Tensor._make(a.data.transpose(axes), (a,), backward)


_register("take_slice")


def take_slice(a, idx):
    """Basic (slice/int) indexing; gradients scatter back into place."""
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

    return Tensor._make(a.data[idx], (a,), backward)


_register("concat")


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- linear algebra -----------------------------------------------------------

_register("matmul")


def matmul(a, b):
    """Batched matrix product with broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_sum_to_shape(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_sum_to_shape(gb, b.shape))

    return Tensor._make(a.data @ b.data, (a, b), backward)


# -- fused neural-net ops -----------------------------------------------------

_register("softmax")


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - inner))

    return Tensor._make(y, (a,), backward)


_register("layer_norm")


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance. No affine part."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def backward(g):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (g - gm - y * gy))

    return Tensor._make(y, (a,), backward)


_register("embedding")


def embedding(table, ids):
    """Row lookup into a learned table; ids is an integer ndarray."""
    table = _as_tensor(table)
    ids = np.asarray(ids)

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table._accumulate(full)

    return Tensor._make(table.data[ids], (table,), backward)


_register("rope_rotate")


def rope_rotate(x, cos, sin):
    """Rotate interleaved (even, odd) channel pairs by per-position angles.

    `cos`/`sin` are constant arrays broadcastable to x[..., ::2]. The
    rotation is orthogonal, so the backward pass rotates by the negated
    angles.
    """
    x = _as_tensor(x)
    x1 = x.data[..., 0::2]
    x2 = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def backward(g):
        if x.requires_grad:
            g1 = g[..., 0::2]
            g2 = g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = g1 * cos + g2 * sin
            gx[..., 1::2] = -g1 * sin + g2 * cos
            x._accumulate(gx)

    return Tensor._make(out, (x,), backward)


def where_const(mask, a, b):
    """Select between two tensors with a constant boolean mask."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(np.where(mask, 0.0, g), b.shape))

    return Tensor._make(np.where(mask, a.data, b.data), (a, b), backward)


OPS.append("where_const")


# -- gradient verification ----------------------------------------------------


def grad_check(fn, tensors, eps=1e-5):
    """Max relative error between backprop and central finite differences.

    `fn` maps nothing to a scalar Tensor built from `tensors` (closures own
    the inputs). Every element of every tensor in `tensors` is perturbed,
    so keep shapes small. Use float64 data for meaningful tolerances.
    """
    for t in tensors:
        t.zero_grad()
    out = fn()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            denom = abs(fd) + abs(gflat[i]) + 1e-10
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst
