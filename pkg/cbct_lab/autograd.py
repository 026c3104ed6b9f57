"""
Minimal reverse-mode differentiation over numpy float64 arrays.

Every operation returns a Tensor that remembers its parents and a closure
mapping the output gradient to one gradient per parent. Tensor.backward()
walks the graph in reverse topological order; only leaves (tensors created
directly, e.g. parameters) keep a .grad. Reduction orders are fixed, so
results are bitwise reproducible.
"""

import numpy as np
from scipy.special import erf

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        return _node(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        return _node(self.data - other.data, (self, other),
                     lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        return _node(self.data * other.data, (self, other),
                     lambda g: (_unbroadcast(g * other.data, self.shape),
                                _unbroadcast(g * self.data, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return _node(self.data / other.data, (self, other),
                     lambda g: (_unbroadcast(g / other.data, self.shape),
                                _unbroadcast(-g * self.data / other.data ** 2, other.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")

        def backward(g):
            ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
            gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
            return _unbroadcast(ga, self.shape), _unbroadcast(gb, other.shape)

        return _node(np.matmul(self.data, other.data), (self, other), backward)

    def __getitem__(self, index):
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            return (full,)

        return _node(self.data[index], (self,), backward)

    # reductions / shape ----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis):
        """Maximum along one axis; the gradient goes to the first maximal entry."""
        arg = np.expand_dims(np.argmax(self.data, axis=axis), axis)
        out = np.take_along_axis(self.data, arg, axis=axis).squeeze(axis)

        def backward(g):
            full = np.zeros_like(self.data)
            np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
            return (full,)

        return _node(out, (self,), backward)

    def reshape(self, *shape):
        return _node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(self.shape),))

    def transpose(self, *axes):
        inverse = np.argsort(axes)
        return _node(self.data.transpose(*axes), (self,), lambda g: (g.transpose(*inverse),))

    # elementwise -----------------------------------------------------------

    def abs(self):
        return _node(np.abs(self.data), (self,), lambda g: (g * np.sign(self.data),))

    def square(self):
        return _node(self.data ** 2, (self,), lambda g: (2.0 * g * self.data,))

    def exp(self):
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _node(data, parents, backward):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Functions
# ---------------------------------------------------------------------------

def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data / SQRT2))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x.data ** 2)
    return _node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def softplus(x: Tensor) -> Tensor:
    sigmoid = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(np.logaddexp(0.0, x.data), (x,), lambda g: (g * sigmoid,))


def softmax(x: Tensor, axis=0) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _node(out, (x,), backward)


def sparse_matmul(matrix, x: Tensor) -> Tensor:
    """Constant sparse (P, n) matrix times x with leading dimension n."""
    rest = x.shape[1:]
    flat = x.data.reshape(x.shape[0], -1)

    def backward(g):
        return ((matrix.T @ g.reshape(g.shape[0], -1)).reshape(x.shape),)

    return _node(np.asarray(matrix @ flat).reshape((matrix.shape[0],) + rest), (x,), backward)


def _window(offset, out_shape, stride):
    return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_shape))


def conv(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """
    N-d cross-correlation. x: (N, Cin, *S), weight: (Cout, Cin, *K), bias: (Cout,).
    Loops over kernel offsets; each offset contributes one tensordot.
    """
    dims = x.ndim - 2
    kernel = weight.shape[2:]
    pad = [(0, 0), (0, 0)] + [(padding, padding)] * dims
    xp = np.pad(x.data, pad)
    out_shape = tuple((s + 2 * padding - k) // stride + 1 for s, k in zip(x.shape[2:], kernel))
    lead = (slice(None), slice(None))

    out = np.zeros((x.shape[0], weight.shape[0]) + out_shape)
    for offset in np.ndindex(*kernel):
        patch = xp[lead + _window(offset, out_shape, stride)]
        wk = weight.data[lead + offset]
        out += np.swapaxes(np.tensordot(wk, patch, axes=([1], [1])), 0, 1)
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * dims)

    parents = (x, weight) if bias is None else (x, weight, bias)
    spatial = tuple(range(2, 2 + dims))

    def backward(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(weight.data)
        for offset in np.ndindex(*kernel):
            window = lead + _window(offset, out_shape, stride)
            patch = xp[window]
            gw[lead + offset] = np.tensordot(g, patch, axes=((0,) + spatial, (0,) + spatial))
            if gx is not None:
                wk = weight.data[lead + offset]
                gx[window] += np.swapaxes(np.tensordot(wk, g, axes=([0], [1])), 0, 1)
        if gx is not None:
            gx = gx[lead + tuple(slice(padding, padding + s) for s in x.shape[2:])]
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0,) + spatial),)
        return grads

    return _node(out, parents, backward)


def upsample_nearest(x: Tensor, factor=2) -> Tensor:
    """Repeat every spatial cell factor times along each spatial axis of (N, C, *S)."""
    out = x.data
    for axis in range(2, x.ndim):
        out = np.repeat(out, factor, axis=axis)

    def backward(g):
        shape = list(x.shape[:2])
        for size in x.shape[2:]:
            shape += [size, factor]
        g = g.reshape(shape)
        return (g.sum(axis=tuple(range(3, len(shape), 2))),)

    return _node(out, (x,), backward)
