"""Dense N-d tensors with reverse-mode automatic differentiation.

Covers exactly the operations the networks and losses need: arithmetic
with trailing-dimension broadcasting, the usual pointwise nonlinearities,
axis reductions, valid 3D convolution and the subpixel shuffle. Arrays
are channel-last (n, X, Y, Z, c); convolution weights (k, k, k, cin, cout).

A forward pass records the graph onto the produced tensors; calling
`backward()` on a scalar walks it once in reverse topological order and
accumulates `.grad` on every `requires_grad` tensor. Graphs are one-shot:
a second backward without re-running the forward raises `StateError`.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .errors import ContractError, DimensionError, GeometryError, StateError

_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after trailing-dimension broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "fault",
                 "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.fault = False
        self._parents = ()
        self._backward = None
        self._consumed = False

    # ---------------------------------------------------------- basics

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def has_fault(self):
        """NaN/Inf anywhere in the data is a detectable fault state."""
        return self.fault or not np.isfinite(self.data).all()

    def detach(self):
        return Tensor(self.data)

    # ------------------------------------------------------ graph plumbing

    def _record(self, parents, backward_fn):
        if _grad_enabled and any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = tuple(parents)
            self._backward = backward_fn

    def _accumulate(self, grad, own=False):
        """Add `grad` into the buffer. `own=True` promises the array is a
        fresh unshared temporary that may be adopted without copying."""
        if self.grad is None:
            if own and grad.dtype == self.data.dtype and grad.flags.writeable:
                self.grad = grad
            else:
                self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self):
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if self._consumed:
            raise StateError("backward already ran on this graph; re-record the forward pass")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            node._consumed = True
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._backward = None
            node._parents = ()
            if node is not self and node.requires_grad is False:
                node.grad = None

    # ------------------------------------------------------- arithmetic

    @staticmethod
    def _lift(x, like):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.dtype))

    def __add__(self, other):
        other = self._lift(other, self)
        out = Tensor(self.data + other.data)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.shape)
                a._accumulate(ga, own=ga is not g)
            if b.requires_grad:
                gb = _unbroadcast(g, b.shape)
                b._accumulate(gb, own=gb is not g)

        out._record((a, b), bwd)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data)
        a = self
        out._record((a,), lambda g: a._accumulate(-g, own=True))
        return out

    def __sub__(self, other):
        other = self._lift(other, self)
        out = Tensor(self.data - other.data)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.shape)
                a._accumulate(ga, own=ga is not g)
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape), own=True)

        out._record((a, b), bwd)
        return out

    def __rsub__(self, other):
        return self._lift(other, self) - self

    def __mul__(self, other):
        other = self._lift(other, self)
        out = Tensor(self.data * other.data)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape), own=True)
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape), own=True)

        out._record((a, b), bwd)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other, self)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = Tensor(self.data / other.data)
        if np.any(other.data == 0):
            out.fault = True
        a, b = self, other

        def bwd(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g / b.data, a.shape), own=True)
                if b.requires_grad:
                    b._accumulate(
                        _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
                        own=True,
                    )

        out._record((a, b), bwd)
        return out

    def __rtruediv__(self, other):
        return self._lift(other, self) / self

    # ------------------------------------------------------- pointwise

    def square(self):
        out = Tensor(self.data * self.data)
        a = self
        out._record((a,), lambda g: a._accumulate(g * (2.0 * a.data), own=True))
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data))
        a, y = self, out.data
        out._record((a,), lambda g: a._accumulate(g * (0.5 / y), own=True))
        return out

    def exp(self):
        out = Tensor(np.exp(self.data))
        a, y = self, out.data
        out._record((a,), lambda g: a._accumulate(g * y, own=True))
        return out

    def log(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = Tensor(np.log(self.data))
        a = self
        out._record((a,), lambda g: a._accumulate(g / a.data, own=True))
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0))
        a = self
        out._record((a,), lambda g: a._accumulate(g * (a.data > 0), own=True))
        return out

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-np.clip(self.data, -60, 60)))
        out = Tensor(y.astype(self.dtype, copy=False))
        a = self
        out._record((a,), lambda g: a._accumulate(g * (y * (1.0 - y)), own=True))
        return out

    def softplus(self):
        # ln(1+e^x), linear branch above 30 to dodge float32 exp overflow
        x = self.data
        y = np.where(x > 30, x, np.log1p(np.exp(np.minimum(x, 30))))
        out = Tensor(y.astype(self.dtype, copy=False))
        a = self
        sig = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
        out._record((a,), lambda g: a._accumulate(g * sig, own=True))
        return out

    # ------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims=False):
        if axis is not None and not isinstance(axis, int) and len(axis) == 0:
            out = Tensor(self.data.copy())   # empty axis set: identity
            a = self
            out._record((a,), lambda g: a._accumulate(g))
            return out
        axis = _norm_axes(axis, self.data.ndim)
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims))
        a = self

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.shape))

        out._record((a,), bwd)
        return out

    def mean(self, axis=None, keepdims=False):
        axis = _norm_axes(axis, self.data.ndim)
        count = self.data.size if axis is None else int(
            np.prod([self.data.shape[i] for i in axis])
        )
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape))
        a = self
        out._record((a,), lambda g: a._accumulate(g.reshape(a.shape)))
        return out


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    if any(not -ndim <= a < ndim for a in axis):
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------- conv


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Valid convolution of (n,X,Y,Z,cin) with (k,k,k,cin,cout) + bias."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise DimensionError(
            f"conv3d expects 5-d input and weight, got {x.data.ndim}-d/{w.data.ndim}-d"
        )
    k = w.shape[0]
    if w.shape[1] != k or w.shape[2] != k:
        raise DimensionError(f"kernel must be cubic, got {w.shape[:3]}")
    if w.shape[3] != x.shape[4]:
        raise DimensionError(
            f"kernel expects {w.shape[3]} input channels, input has {x.shape[4]}"
        )
    if any(x.shape[i + 1] < k for i in range(3)):
        raise GeometryError(
            f"kernel size {k} exceeds input extent {x.shape[1:4]}"
        )
    if b is not None and b.shape != (w.shape[4],):
        raise DimensionError(f"bias shape {b.shape} != ({w.shape[4]},)")

    keep_col = _grad_enabled and w.requires_grad
    data, col = backend.conv3d_forward(
        x.data, w.data, None if b is None else b.data, keep_col
    )
    out = Tensor(data)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accumulate(backend.conv3d_backward_input(g, w.data, x.shape),
                          own=True)
        if w.requires_grad:
            gw, gb = backend.conv3d_backward_weight(g, x.data, k, col)
            w._accumulate(gw, own=True)
            if b is not None and b.requires_grad:
                b._accumulate(gb, own=True)
        elif b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1, 2, 3)), own=True)

    out._record(parents, bwd)
    return out


# ------------------------------------------------------------- shuffle


def _shuffle_perm(r):
    # reshape (n,h,w,d,C,r,r,r) -> transpose so the r-offsets interleave
    # into the spatial axes; block channel index is dx + r*dy + r^2*dz.
    return (0, 1, 7, 2, 6, 3, 5, 4)


def shuffle3d(x: Tensor, r: int) -> Tensor:
    """Channel-to-space rearrangement: (n,h,w,d,C*r^3) -> (n,rh,rw,rd,C)."""
    n, h, w, d, c = x.shape
    if r < 1:
        raise GeometryError(f"upsampling rate must be >= 1, got {r}")
    if c % r ** 3 != 0:
        raise GeometryError(f"{c} channels not divisible by r^3 = {r ** 3}")
    C = c // r ** 3
    if r == 1:
        return x.reshape(n, h, w, d, C)

    def fwd(a):
        blk = a.reshape(n, h, w, d, C, r, r, r)
        return np.ascontiguousarray(blk.transpose(_shuffle_perm(r))).reshape(
            n, h * r, w * r, d * r, C
        )

    out = Tensor(fwd(x.data))
    a = x
    out._record((a,), lambda g: a._accumulate(_unshuffle_data(g, r), own=True))
    return out


def _unshuffle_data(y, r):
    n, H, W, D, C = y.shape
    h, w, d = H // r, W // r, D // r
    blk = y.reshape(n, h, r, w, r, d, r, C)
    # axes back to (n,h,w,d,C,bz,by,bx)
    return np.ascontiguousarray(blk.transpose(0, 1, 3, 5, 7, 6, 4, 2)).reshape(
        n, h, w, d, C * r ** 3
    )


def unshuffle3d(y: Tensor, r: int) -> Tensor:
    """Exact inverse of `shuffle3d`."""
    n, H, W, D, C = y.shape
    if any(s % r != 0 for s in (H, W, D)):
        raise GeometryError(f"spatial dims {(H, W, D)} not divisible by r={r}")
    if r == 1:
        return y.reshape(n, H, W, D, C)
    out = Tensor(_unshuffle_data(y.data, r))
    a = y

    def bwd(g):
        n_, h, w, d, c = g.shape[0], H // r, W // r, D // r, C * r ** 3
        blk = g.reshape(n_, h, w, d, C, r, r, r)
        a._accumulate(
            np.ascontiguousarray(blk.transpose(_shuffle_perm(r))).reshape(a.shape),
            own=True,
        )

    out._record((a,), bwd)
    return out
