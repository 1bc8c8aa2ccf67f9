"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is written in terms of differentiable ``Tensor`` ops, so
gradients can themselves be differentiated (``create_graph=True``). That is
what the exact second-order meta-update relies on.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes, or a size-1 operand against anything. Anything else has to go through
an explicit :func:`broadcast_to`.
"""

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, DomainError

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

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
        return self._backward is None

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if _is_number(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _is_number(x):
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward
                return out
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def _pair(a, b):
    if a.__class__ is not Tensor:
        a = Tensor(a)
    if b.__class__ is not Tensor:
        b = Tensor(b)
    if a.data.shape == b.data.shape:
        return a, b
    if a.size == 1 and b.size != 1:
        return broadcast_to(reshape(a, ()), b.shape), b
    if b.size == 1 and a.size != 1:
        return a, broadcast_to(reshape(b, ()), a.shape)
    if a.size == 1 and b.size == 1:
        if a.ndim >= b.ndim:
            return a, reshape(b, a.shape)
        return reshape(a, b.shape), b
    raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")


# elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, scale(g, -1.0)))


def mul(a, b):
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)))


def div(a, b):
    a, b = _pair(a, b)

    def backward(g):
        gb = scale(div(mul(g, a), mul(b, b)), -1.0) if b.requires_grad else None
        return div(g, b), gb

    return _make(a.data / b.data, (a, b), backward)


def scale(a, c):
    """Multiply by a Python constant."""
    c = float(c)
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (scale(g, c),))


def relu(a):
    a = as_tensor(a)
    # subgradient at exactly 0 is 0
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),))


def exp(a):
    a = as_tensor(a)
    out = None

    def backward(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), backward)
    return out


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = None

    def backward(g):
        return (div(scale(g, 0.5), out),)

    out = _make(np.sqrt(a.data), (a,), backward)
    return out


# linear algebra / shape ---------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (transpose(g),))


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return _make(data, (a,), lambda g: (reshape(g, src),))


def broadcast_to(a, shape):
    """Explicit numpy-style broadcast; the backward pass sums the expanded axes."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    src = a.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1
    )

    def backward(g):
        if axes:
            g = tsum(g, axis=axes, keepdims=True)
        return (reshape(g, src),)

    return _make(data, (a,), backward)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def backward(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(np.asarray(data, dtype=np.float64), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return scale(tsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def take(a, index):
    """Basic or integer-array indexing; gradient scatters back."""
    a = as_tensor(a)
    data = a.data[index]
    src = a.shape
    return _make(np.array(data, dtype=np.float64), (a,), lambda g: (scatter(g, index, src),))


def scatter(g, index, shape):
    """Adjoint of :func:`take`: zeros of ``shape`` with ``g`` added at ``index``."""
    g = as_tensor(g)
    data = np.zeros(shape)
    np.add.at(data, index, g.data)
    return _make(data, (g,), lambda h: (take(h, index),))


def affine(x, w, b):
    """``x @ w + b`` with the bias row added to every row of the product."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine shape mismatch: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match output width {w.shape[1]}")

    def backward(g):
        gx = matmul(g, transpose(w)) if x.requires_grad else None
        gw = matmul(transpose(x), g) if w.requires_grad else None
        gb = tsum(g, axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(x.data @ w.data + b.data, (x, w, b), backward)


def l2_normalize(v, axis=-1):
    """Scale ``v`` to unit l2 norm along ``axis`` (rows of a matrix by default).

    Gradient: ``(g - y * <g, y>) / |v|`` with ``y`` the normalized output.
    """
    v = as_tensor(v)
    norms = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("cannot normalize a zero vector")
    shape = v.shape
    out = None

    def backward(g):
        norm = sqrt(tsum(mul(v, v), axis=axis, keepdims=True))
        inner = broadcast_to(tsum(mul(g, out), axis=axis, keepdims=True), shape)
        return (div(sub(g, mul(out, inner)), broadcast_to(norm, shape)),)

    out = _make(v.data / norms, (v,), backward)
    return out


def zeros(shape):
    return Tensor(np.zeros(shape))


def ones(shape):
    return Tensor(np.ones(shape))


# backward engine ----------------------------------------------------------

def _collect(root):
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    # parents are always created before children, so descending id order is
    # a valid reverse topological order
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def _propagate(root, seed, create_graph):
    nodes = _collect(root)
    grads = {root._id: seed}
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = bool(create_graph)
    try:
        for node in nodes:
            g = grads.get(node._id)
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(parent._id)
                grads[parent._id] = pg if acc is None else add(acc, pg)
    finally:
        _grad_enabled = prev
    return nodes, grads


def _check_scalar(loss):
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad ancestor.

    Calling twice without clearing grads adds the gradients again.
    """
    _check_scalar(loss)
    if not loss.requires_grad:
        return
    nodes, grads = _propagate(loss, Tensor(np.ones(loss.shape)), create_graph=False)
    for node in nodes:
        g = grads.get(node._id)
        if g is None:
            continue
        node.grad = g.data.copy() if node.grad is None else node.grad + g.data


def grad(loss, inputs, create_graph=False):
    """Return d(loss)/d(input) for each input as Tensors, leaving ``.grad`` alone.

    Inputs the loss does not depend on get zero gradients. With
    ``create_graph=True`` the returned tensors are themselves differentiable.
    """
    _check_scalar(loss)
    inputs = list(inputs)
    if not loss.requires_grad:
        return [Tensor(np.zeros(t.shape)) for t in inputs]
    _, grads = _propagate(loss, Tensor(np.ones(loss.shape)), create_graph=create_graph)
    out = []
    for t in inputs:
        g = grads.get(t._id)
        out.append(Tensor(np.zeros(t.shape)) if g is None else g)
    return out
