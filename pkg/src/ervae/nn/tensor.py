"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient the result records its parents and a closure that
pushes the incoming gradient back to them; :meth:`Tensor.backward` walks
that graph in reverse topological order and then frees it.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ervae.errors import NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- elementwise arithmetic -----------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)

        def backward(g):
            return unbroadcast(g, self.shape), unbroadcast(g, other.shape)

        return Tensor._result(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = Tensor._lift(other)

        def backward(g):
            return unbroadcast(g, self.shape), unbroadcast(-g, other.shape)

        return Tensor._result(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)

        def backward(g):
            return (unbroadcast(g * other.data, self.shape),
                    unbroadcast(g * self.data, other.shape))

        return Tensor._result(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out = self.data / other.data

        def backward(g):
            return (unbroadcast(g / other.data, self.shape),
                    unbroadcast(-g * out / other.data, other.shape))

        return Tensor._result(out, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(exponent)

        def backward(g):
            return (g * p * self.data ** (p - 1.0),)

        return Tensor._result(self.data ** p, (self,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape manipulation ---------------------------------------------------

    def __getitem__(self, idx):
        shape = self.shape

        fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def backward(g):
            full = np.zeros(shape)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return Tensor._result(self.data[idx], (self,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(self.data.reshape(shape), (self,),
                              lambda g: (g.reshape(old),))

    @property
    def T(self):
        return Tensor._result(self.data.T, (self,), lambda g: (g.T,))

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- unary functions ------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,))

    def log(self):
        return Tensor._result(np.log(self.data), (self,), lambda g: (g / self.data,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        # subgradient at exactly 0 is 0
        mask = self.data > 0
        return Tensor._result(self.data * mask, (self,), lambda g: (g * mask,))

    def sin(self):
        return Tensor._result(np.sin(self.data), (self,), lambda g: (g * np.cos(self.data),))

    def cos(self):
        return Tensor._result(np.cos(self.data), (self,), lambda g: (-g * np.sin(self.data),))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,), lambda g: (0.5 * g / out,))

    def softplus(self):
        x = self.data
        out = np.logaddexp(0.0, x)
        sig = np.exp(x - out)
        return Tensor._result(out, (self,), lambda g: (g * sig,))

    def clip(self, lo, hi):
        mask = (self.data >= lo) & (self.data <= hi)
        return Tensor._result(np.clip(self.data, lo, hi), (self,), lambda g: (g * mask,))

    # -- reverse sweep --------------------------------------------------------

    def backward(self, grad=None):
        """Populate ``.grad`` on every ancestor that requires a gradient.

        Leaf gradients accumulate; interior nodes are released afterwards.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")

        order, seen, stack = [], set(), [(self, False)]
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

        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def as_tensor(x):
    return Tensor._lift(x)


def matmul(a, b):
    a, b = Tensor._lift(a), Tensor._lift(b)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias):
    """``x @ weight.T + bias`` as one tape node; weight has shape (out, in)."""

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return Tensor._result(x.data @ weight.data.T + bias.data, (x, weight, bias), backward)


def concat(tensors, axis=-1):
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def atan2(y, x):
    y, x = Tensor._lift(y), Tensor._lift(x)
    r2 = x.data ** 2 + y.data ** 2

    def backward(g):
        return (unbroadcast(g * x.data / r2, y.shape),
                unbroadcast(-g * y.data / r2, x.shape))

    return Tensor._result(np.arctan2(y.data, x.data), (y, x), backward)


def custom_op(data, parents, vjp):
    """Record an op whose vector-Jacobian product is supplied by the caller.

    ``vjp(g)`` must return one gradient (or None) per parent.
    """
    return Tensor._result(np.asarray(data, dtype=np.float64), tuple(parents), vjp)


def check_finite(t, what="value"):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite {what}")
    return t
