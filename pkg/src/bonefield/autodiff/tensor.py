"""Reverse-mode automatic differentiation over dense float64 arrays.

A `Tensor` wraps a numpy array plus the graph edges needed to backpropagate.
Graphs are built eagerly by the op functions below; `backward(loss)` walks the
graph in reverse topological order and accumulates vector-Jacobian products.

Conventions:
  * everything is float64; inputs are converted on construction,
  * tensors are treated as immutable once created,
  * ops skip graph construction entirely when no operand requires gradients,
  * calling `backward` twice on the same graph accumulates into `.grad`
    (use `zero_grad` on the parameter store between steps).

Broadcasting follows numpy's trailing-dimension rules; gradients of broadcast
operands are reduced back to the operand shape.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .. import backend

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference rendering)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.shapes = (tuple(shape_a), tuple(shape_b))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, vjp):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

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

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


# -- elementwise binary -------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(out, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return Tensor._result(out, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._result(out, (a, b), vjp)


# -- elementwise unary --------------------------------------------------------

def neg(a):
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._result(out, (a,), vjp)


def square(a):
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return Tensor._result(out, (a,), vjp)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a):
    a = as_tensor(a)
    return Tensor._result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = as_tensor(a)
    return Tensor._result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def abs_(a):
    a = as_tensor(a)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return Tensor._result(out, (a,), vjp)


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        return (g * _sigmoid(a.data),)

    return Tensor._result(out, (a,), vjp)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(np.asarray(a.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (a,), vjp)


def clip(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def vjp(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    return Tensor._result(out, (a,), vjp)


# -- reductions ---------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), vjp)


def cumsum(a, axis):
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return Tensor._result(out, (a,), vjp)


def l2norm(a, axis=-1, keepdims=False):
    """Euclidean norm along `axis`. Gradient is 0 at exactly-zero vectors."""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0.0, out, 1.0)
        return (g * a.data / safe * (out > 0.0),)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return Tensor._result(res, (a,), vjp)


def softmax(a, axis=-1):
    """Numerically stable softmax (max-subtraction)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (a,), vjp)


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return Tensor._result(out, (a,), vjp)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return Tensor._result(out, (a,), vjp)


def swap_last2(a):
    a = as_tensor(a)
    out = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return Tensor._result(out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis], ref[axis] = 0, 0
        if s != ref:
            raise ShapeMismatchError("concat", tensors[0].shape, t.shape)
        ref = list(tensors[0].shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._result(out, tuple(tensors), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._result(out, tuple(tensors), vjp)


def getitem(a, key):
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        buf = np.zeros(a.shape)
        np.add.at(buf, key, g)
        return (buf,)

    return Tensor._result(np.asarray(out), (a,), vjp)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None
    an, bn = a.ndim, b.ndim
    if an >= 2 and bn >= 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    def vjp(g):
        if an == 1 and bn == 1:
            return g * b.data, g * a.data
        if bn == 1:
            # (..., n, m) @ (m,)
            ga = g[..., :, None] * b.data
            gb = np.tensordot(g, a.data, axes=(range(g.ndim), range(g.ndim)))
            return ga, gb
        if an == 1:
            # (n,) @ (n, m)
            return g @ b.data.T, np.outer(a.data, g)
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return Tensor._result(out, (a, b), vjp)


def skew(w):
    """Map (..., 3) vectors to their (..., 3, 3) cross-product matrices."""
    w = as_tensor(w)
    x, y, z = w.data[..., 0], w.data[..., 1], w.data[..., 2]
    zero = np.zeros_like(x)
    out = np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=-2)

    def vjp(g):
        gw = np.stack([
            g[..., 2, 1] - g[..., 1, 2],
            g[..., 0, 2] - g[..., 2, 0],
            g[..., 1, 0] - g[..., 0, 1],
        ], axis=-1)
        return (gw,)

    return Tensor._result(out, (w,), vjp)


def apply_rigid(rot, trans, x):
    """Apply K rigid transforms to P points: out[p,k] = rot[k] @ x[p] + trans[k].

    rot (K,3,3), trans (K,3), x (P,3) -> (P,K,3).
    """
    rot, trans, x = as_tensor(rot), as_tensor(trans), as_tensor(x)
    if rot.shape[1:] != (3, 3) or trans.shape != (rot.shape[0], 3) or x.shape[1:] != (3,):
        raise ShapeMismatchError("apply_rigid", rot.shape, x.shape)
    out = np.einsum("kij,pj->pki", rot.data, x.data) + trans.data[None, :, :]

    def vjp(g):
        g_rot = np.einsum("pki,pj->kij", g, x.data)
        g_trans = g.sum(axis=0)
        g_x = np.einsum("kij,pki->pj", rot.data, g)
        return g_rot, g_trans, g_x

    return Tensor._result(out, (rot, trans, x), vjp)


# -- grid kernels (backend-dispatched) ----------------------------------------

def grid_gather(grid, pts):
    """Trilinear interpolation of all channels: grid (X,Y,Z,C), pts (P,3) in
    continuous voxel coordinates (already clipped to [0, dim-1])."""
    grid, pts = as_tensor(grid), as_tensor(pts)
    out = backend.tri_gather(grid.data, pts.data)

    def vjp(g):
        g_grid, g_pts = backend.tri_gather_vjp(grid.data, pts.data, np.ascontiguousarray(g))
        return g_grid, g_pts

    return Tensor._result(out, (grid, pts), vjp)


def bone_softmax_gather(logits, pts):
    """Per-bone softmax-channel query.

    out[p,k] = softmax over C of trilinear(logits, pts[p,k])[k], with
    logits (X,Y,Z,C), pts (P,K,3) in voxel coordinates, C == K+1.
    """
    logits, pts = as_tensor(logits), as_tensor(pts)
    out = backend.bone_weight(logits.data, pts.data)

    def vjp(g):
        g_grid, g_pts = backend.bone_weight_vjp(logits.data, pts.data, np.ascontiguousarray(g))
        return g_grid, g_pts

    return Tensor._result(out, (logits, pts), vjp)


# -- backward pass ------------------------------------------------------------

def backward(loss):
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    `loss` must be scalar. Repeated calls accumulate.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any requires_grad tensor")

    # iterative post-order topological sort (deterministic)
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, copy=True).reshape(node.shape)
        else:
            node.grad = node.grad + np.asarray(g).reshape(node.shape)
        if node._vjp is None:
            continue
        parent_grads = node._vjp(np.asarray(g).reshape(node.shape))
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
