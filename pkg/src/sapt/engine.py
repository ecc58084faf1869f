"""Reverse-mode automatic differentiation over numpy arrays.

Training only needs gradients with respect to a handful of prompt matrices
and one bias vector, so a small tape is enough: wrap the trainable arrays in
:class:`Tensor`, build the forward pass with the generic helpers below, call
:func:`backward` on the scalar loss, and read ``.grad`` off the leaves.

Every helper in this module accepts either a ``Tensor`` or a plain numpy
array and returns the same kind, which lets the rest of the package share a
single forward implementation between training (differentiable) and
evaluation (plain numpy).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "is_tensor",
    "val",
    "exp",
    "log",
    "tanh",
    "sqrt",
    "absolute",
    "sum",
    "mean",
    "max",
    "stack",
    "concat",
    "l2_normalize",
    "softmax",
]

_builtin_sum = sum


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # collapse leading axes numpy prepended
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Node in the autodiff graph holding a float64 numpy value."""

    # keep numpy from hijacking binary ops on mixed operands
    __array_ufunc__ = None
    __array_priority__ = 1000

    __slots__ = ("value", "grad", "_parents", "_vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, _neg(other))

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __pow__(self, exponent):
        return _pow(self, exponent)

    def __getitem__(self, key):
        return _getitem(self, key)

    @property
    def T(self):
        return _transpose(self)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def val(x) -> np.ndarray:
    """Underlying numpy value of a Tensor, or the input coerced to an array."""
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _const(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _make(value, parents, vjps) -> Tensor:
    return Tensor(value, parents=tuple(parents), vjps=tuple(vjps))


# -- primitive ops ----------------------------------------------------------


def _add(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.add(a, b)
    av, bv = val(a), val(b)
    out = av + bv
    parents, vjps = [], []
    if is_tensor(a):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g, av.shape))
    if is_tensor(b):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(g, bv.shape))
    return _make(out, parents, vjps)


def _neg(a):
    if not is_tensor(a):
        return np.negative(a)
    return _make(-a.value, [a], [lambda g: -g])


def _mul(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.multiply(a, b)
    av, bv = val(a), val(b)
    out = av * bv
    parents, vjps = [], []
    if is_tensor(a):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g * bv, av.shape))
    if is_tensor(b):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(g * av, bv.shape))
    return _make(out, parents, vjps)


def _div(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.divide(a, b)
    av, bv = val(a), val(b)
    out = av / bv
    parents, vjps = [], []
    if is_tensor(a):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g / bv, av.shape))
    if is_tensor(b):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape))
    return _make(out, parents, vjps)


def _matmul(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.matmul(a, b)
    av, bv = val(a), val(b)
    if av.ndim == 1 and bv.ndim == 1:
        return sum(_mul(a, b))
    out = av @ bv
    parents, vjps = [], []
    # 1-D operands need the standard promote/demote bookkeeping
    if is_tensor(a):
        parents.append(a)
        if av.ndim == 1:
            vjps.append(lambda g: (np.atleast_2d(g) @ bv.T).reshape(av.shape))
        elif bv.ndim == 1:
            vjps.append(lambda g: np.outer(g, bv) if g.ndim == 1 else g @ bv.T)
        else:
            vjps.append(lambda g: g @ bv.T)
    if is_tensor(b):
        parents.append(b)
        if bv.ndim == 1:
            vjps.append(lambda g: (av.T @ np.atleast_2d(g).T).reshape(bv.shape))
        elif av.ndim == 1:
            vjps.append(lambda g: np.outer(av, g))
        else:
            vjps.append(lambda g: av.T @ g)
    return _make(out, parents, vjps)


def _pow(a, exponent):
    if not is_tensor(a):
        return np.power(a, exponent)
    p = float(exponent)
    av = a.value
    return _make(av**p, [a], [lambda g: g * p * av ** (p - 1.0)])


def _getitem(a, key):
    out = a.value[key]

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return full

    return _make(out, [a], [vjp])


def _transpose(a):
    return _make(a.value.T, [a], [lambda g: g.T])


def exp(x):
    if not is_tensor(x):
        return np.exp(x)
    out = np.exp(x.value)
    return _make(out, [x], [lambda g: g * out])


def log(x):
    if not is_tensor(x):
        return np.log(x)
    return _make(np.log(x.value), [x], [lambda g: g / x.value])


def tanh(x):
    if not is_tensor(x):
        return np.tanh(x)
    out = np.tanh(x.value)
    return _make(out, [x], [lambda g: g * (1.0 - out * out)])


def sqrt(x):
    if not is_tensor(x):
        return np.sqrt(x)
    out = np.sqrt(x.value)
    return _make(out, [x], [lambda g: g / (2.0 * out)])


def absolute(x):
    if not is_tensor(x):
        return np.abs(x)
    return _make(np.abs(x.value), [x], [lambda g: g * np.sign(x.value)])


def sum(x, axis=None, keepdims=False):
    if not is_tensor(x):
        return np.sum(x, axis=axis, keepdims=keepdims)
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.value.shape).copy()

    return _make(out, [x], [vjp])


def mean(x, axis=None, keepdims=False):
    if not is_tensor(x):
        return np.mean(x, axis=axis, keepdims=keepdims)
    n = x.value.size if axis is None else x.value.shape[axis]
    return sum(x, axis=axis, keepdims=keepdims) / float(n)


def max(x, axis=None, keepdims=False):
    if not is_tensor(x):
        return np.max(x, axis=axis, keepdims=keepdims)
    out = np.max(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        out_b = out
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            out_b = np.expand_dims(out, axis)
        mask = (x.value == out_b).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        return mask * g

    return _make(out, [x], [vjp])


def stack(items, axis=0):
    """np.stack semantics; items may mix tensors and arrays."""
    if not any(is_tensor(it) for it in items):
        return np.stack([np.asarray(it) for it in items], axis=axis)
    values = [val(it) for it in items]
    out = np.stack(values, axis=axis)
    parents, vjps = [], []
    for i, it in enumerate(items):
        if not is_tensor(it):
            continue

        def vjp(g, i=i):
            return np.take(g, i, axis=axis)

        parents.append(it)
        vjps.append(vjp)
    return _make(out, parents, vjps)


def concat(items, axis=0):
    if not any(is_tensor(it) for it in items):
        return np.concatenate([np.asarray(it) for it in items], axis=axis)
    values = [val(it) for it in items]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    parents, vjps = [], []
    for i, it in enumerate(items):
        if not is_tensor(it):
            continue
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        parents.append(it)
        vjps.append(vjp)
    return _make(out, parents, vjps)


# -- composite helpers ------------------------------------------------------

_NORM_EPS = 1e-12


def l2_normalize(x, axis=-1):
    """Scale rows (or the whole vector) to unit L2 norm.

    The tiny epsilon keeps degenerate all-zero inputs finite; for any
    realistic feature it perturbs the norm far below the 1e-6 contract.
    """
    sq = sum(x * x, axis=axis, keepdims=True)
    return x / sqrt(sq + _NORM_EPS)


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    shifted = x - max(x, axis=axis, keepdims=True)
    e = exp(shifted)
    return e / sum(e, axis=axis, keepdims=True)


# -- backward pass ----------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate gradients of scalar ``root`` into every reachable leaf."""
    if root.value.ndim != 0:
        raise ValueError("backward() expects a scalar output")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in zip(node._parents, node._vjps):
            contribution = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contribution
            else:
                grads[pid] = contribution
