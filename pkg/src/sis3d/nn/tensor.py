"""Reverse-mode automatic differentiation on dense numpy arrays.

Every differentiable operation produces a new :class:`Tensor` holding a
closure that pushes the output gradient back into its parents.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order.
"""
from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def _unbroadcast(grad, shape):
    # sum out axes that were broadcast in the forward pass
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties ---------------------------------------------------
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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
        return out

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                if parent._backward is None:
                    parent._accumulate(pg)
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), _pairwise(self, other, backward))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), _pairwise(self, other, backward))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), _pairwise(self, other, backward))

    def __matmul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")

        def backward(g):
            return g @ b.T, a.T @ g

        return Tensor._make(a @ b, (self, other), _pairwise(self, other, backward))

    # -- shape manipulation -------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def flatten(self):
        return self.reshape(-1)

    def transpose(self, *axes):
        axes = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        src_shape, dtype = self.shape, self.dtype

        basic = _is_basic_index(index)

        def backward(g):
            full = np.zeros(src_shape, dtype=dtype)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), backward)

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        src = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities -----------------------------------------
    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))


def _pairwise(a, b, backward):
    # backward returning grads for both operands; _make drops constant parents
    if a.requires_grad and b.requires_grad:
        return backward
    if a.requires_grad:
        return lambda g: (backward(g)[0],)
    return lambda g: (backward(g)[1],)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def concat(tensors, axis=0):
    """Concatenate along ``axis``; the gradient is split back to each input."""
    arrays = [t.data for t in tensors]
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    live = [t for t in tensors if t.requires_grad]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p for p, t in zip(parts, tensors) if t.requires_grad)

    out = Tensor(np.concatenate(arrays, axis=axis))
    if live:
        out.requires_grad = True
        out._parents = tuple(live)
        out._backward = backward
    return out


def stack_max(tensors):
    """Elementwise maximum across same-shaped tensors.

    The gradient of each element goes to the first tensor attaining the maximum.
    """
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"stack_max over shapes {sorted(shapes)}")
    stacked = np.stack([t.data for t in tensors])
    winner = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def backward(g):
        return tuple(np.where(winner == i, g, 0).astype(g.dtype) for i, t in enumerate(tensors) if t.requires_grad)

    result = Tensor(out)
    live = tuple(t for t in tensors if t.requires_grad)
    if live:
        result.requires_grad = True
        result._parents = live
        result._backward = backward
    return result
