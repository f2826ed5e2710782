"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every value is a numpy float64 array wrapped in a :class:`Tensor`. Operations
record parent links and a backward closure; calling ``backward()`` on a scalar
replays the recorded graph in exact reverse topological order, accumulating
gradients into every tensor created with ``requires_grad=True``.

Single-threaded per graph. Tensors that do not require grad are safe to share
read-only across threads.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError, UsageError

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "zeros",
    "concat",
    "matmul",
    "softmax_rows",
    "logsumexp_rows",
    "take_flat",
    "pad_hw",
    "narrow",
    "amax_rows",
    "maximum",
    "minimum",
    "gelu",
]

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


class Tensor:
    """A dense array plus the bookkeeping reverse mode needs.

    ``grad`` stays ``None`` until a backward pass touches the tensor; it then
    holds the accumulated gradient with the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        grad_parents = tuple(p for p in parents if p.requires_grad)
        out.requires_grad = bool(grad_parents)
        out._parents = grad_parents
        out._backward = backward if grad_parents else None
        return out

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable requires_grad tensor.

        ``self`` must hold exactly one element. Visits nodes in the reverse of
        a deterministic depth-first topological order, so repeated runs on an
        identical graph produce bit-identical gradients.
        """
        if self.data.size != 1:
            raise UsageError("backward() root must be a scalar tensor")
        order = []
        seen = {id(self)}
        stack = [(self, 0)]
        while stack:
            node, i = stack.pop()
            if i < len(node._parents):
                stack.append((node, i + 1))
                parent = node._parents[i]
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append((parent, 0))
            else:
                order.append(node)
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic (numpy broadcasting, reduced on backward) ----

    def __add__(self, other):
        other = _wrap(other)
        out_data = self.data + other.data

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._result(out_data, (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        out_data = self.data - other.data

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.data.shape))

        return Tensor._result(out_data, (self, other), bwd)

    def __rsub__(self, other):
        return _wrap(other).__sub__(self)

    def __mul__(self, other):
        other = _wrap(other)
        out_data = self.data * other.data

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = self.data / other.data
        if not np.all(np.isfinite(out_data)):
            raise NumericError("division produced non-finite values")

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._result(out_data, (self, other), bwd)

    def __rtruediv__(self, other):
        return _wrap(other).__truediv__(self)

    def __neg__(self):
        def bwd(g, a=self):
            a._accum(-g)

        return Tensor._result(-self.data, (self,), bwd)

    def __matmul__(self, other):
        return matmul(self, other)

    def power(self, exponent):
        """Elementwise power with a constant float exponent."""
        out_data = self.data**exponent
        if not np.all(np.isfinite(out_data)):
            raise NumericError(f"power({exponent}) produced non-finite values")

        def bwd(g, a=self, p=exponent):
            a._accum(g * p * a.data ** (p - 1))

        return Tensor._result(out_data, (self,), bwd)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bwd(g, a=self):
            a._accum(g.reshape(a.data.shape))

        return Tensor._result(out_data, (self,), bwd)

    def transpose(self):
        if self.data.ndim != 2:
            raise DimensionError("transpose expects a 2-D tensor")

        def bwd(g, a=self):
            a._accum(g.T)

        return Tensor._result(self.data.T.copy(), (self,), bwd)

    @property
    def T(self):
        return self.transpose()

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g, a=self, ax=axis, kd=keepdims):
            if ax is not None and not kd:
                g = np.expand_dims(g, ax)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

        return Tensor._result(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- pointwise nonlinearities ---------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        if not np.all(np.isfinite(out_data)):
            raise NumericError("exp overflow")

        def bwd(g, a=self, o=out_data):
            a._accum(g * o)

        return Tensor._result(out_data, (self,), bwd)

    def log(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = np.log(self.data)
        if not np.all(np.isfinite(out_data)):
            raise NumericError("log of non-positive value")

        def bwd(g, a=self):
            a._accum(g / a.data)

        return Tensor._result(out_data, (self,), bwd)

    def sqrt(self):
        with np.errstate(invalid="ignore"):
            out_data = np.sqrt(self.data)
        if not np.all(np.isfinite(out_data)):
            raise NumericError("sqrt of negative value")

        def bwd(g, a=self, o=out_data):
            a._accum(g * 0.5 / o)

        return Tensor._result(out_data, (self,), bwd)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bwd(g, a=self, o=out_data):
            a._accum(g * (1.0 - o * o))

        return Tensor._result(out_data, (self,), bwd)

    def sigmoid(self):
        x = self.data
        out_data = np.empty_like(x)
        pos = x >= 0
        out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out_data[~pos] = ex / (1.0 + ex)

        def bwd(g, a=self, o=out_data):
            a._accum(g * o * (1.0 - o))

        return Tensor._result(out_data, (self,), bwd)

    def arctan(self):
        def bwd(g, a=self):
            a._accum(g / (1.0 + a.data * a.data))

        return Tensor._result(np.arctan(self.data), (self,), bwd)


def _wrap(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _unbroadcast(g, shape):
    """Sum ``g`` back down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- constructors -------------------------------------------------------------


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# -- free functions ------------------------------------------------------------


def matmul(a, b):
    """Matrix product of two 2-D tensors; gradients flow to both operands."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} x {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g, ta=a, tb=b):
        if ta.requires_grad:
            ta._accum(g @ tb.data.T)
        if tb.requires_grad:
            tb._accum(ta.data.T @ g)

    return Tensor._result(out_data, (a, b), bwd)


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = _wrap(a), _wrap(b)
    mask = a.data >= b.data
    out_data = np.where(mask, a.data, b.data)

    def bwd(g, ta=a, tb=b, m=mask):
        if ta.requires_grad:
            ta._accum(_unbroadcast(g * m, ta.data.shape))
        if tb.requires_grad:
            tb._accum(_unbroadcast(g * ~m, tb.data.shape))

    return Tensor._result(out_data, (a, b), bwd)


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to the first operand."""
    a, b = _wrap(a), _wrap(b)
    mask = a.data <= b.data
    out_data = np.where(mask, a.data, b.data)

    def bwd(g, ta=a, tb=b, m=mask):
        if ta.requires_grad:
            ta._accum(_unbroadcast(g * m, ta.data.shape))
        if tb.requires_grad:
            tb._accum(_unbroadcast(g * ~m, tb.data.shape))

    return Tensor._result(out_data, (a, b), bwd)


def softmax_rows(x):
    """Row-stabilized softmax of a 2-D tensor; each row sums to 1."""
    if x.data.ndim != 2:
        raise DimensionError("softmax_rows expects a 2-D tensor")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g, t=x, sm=s):
        inner = (g * sm).sum(axis=1, keepdims=True)
        t._accum(sm * (g - inner))

    return Tensor._result(s, (x,), bwd)


def logsumexp_rows(x):
    """Stable log(sum(exp(row))) of a 2-D tensor, shape m x 1."""
    if x.data.ndim != 2:
        raise DimensionError("logsumexp_rows expects a 2-D tensor")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    out_data = m + np.log(e.sum(axis=1, keepdims=True))

    def bwd(g, t=x, sm=e / e.sum(axis=1, keepdims=True)):
        t._accum(g * sm)

    return Tensor._result(out_data, (x,), bwd)


def amax_rows(x):
    """Per-row maximum of a 2-D tensor, shape m x 1.

    Gradient routes to the first (lowest-index) maximal entry of each row.
    """
    if x.data.ndim != 2:
        raise DimensionError("amax_rows expects a 2-D tensor")
    idx = x.data.argmax(axis=1)
    out_data = x.data[np.arange(x.data.shape[0]), idx].reshape(-1, 1)

    def bwd(g, t=x, j=idx):
        gx = np.zeros_like(t.data)
        gx[np.arange(t.data.shape[0]), j] = g[:, 0]
        t._accum(gx)

    return Tensor._result(out_data, (x,), bwd)


def take_flat(x, indices):
    """Gather from the flattened tensor; output has the index array's shape.

    Backward scatter-adds, so repeated indices accumulate correctly. This one
    primitive backs embedding lookup, im2col patches and nearest-neighbor
    upsampling.
    """
    idx = np.asarray(indices)
    out_data = x.data.reshape(-1)[idx]

    def bwd(g, t=x, i=idx):
        gx = np.zeros(t.data.size)
        np.add.at(gx, i.reshape(-1), g.reshape(-1))
        t._accum(gx.reshape(t.data.shape))

    return Tensor._result(out_data, (x,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g, ts=tensors, sz=sizes, ax=axis):
        offset = 0
        for t, n in zip(ts, sz):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(offset, offset + n)
                t._accum(g[tuple(sl)])
            offset += n

    return Tensor._result(out_data, tuple(tensors), bwd)


def narrow(x, axis, start, length):
    """Contiguous slice along ``axis`` of a 2-D tensor."""
    if x.data.ndim != 2:
        raise DimensionError("narrow expects a 2-D tensor")
    sl = [slice(None), slice(None)]
    sl[axis] = slice(start, start + length)
    out_data = x.data[tuple(sl)].copy()

    def bwd(g, t=x, s=tuple(sl)):
        gx = np.zeros_like(t.data)
        gx[s] = g
        t._accum(gx)

    return Tensor._result(out_data, (x,), bwd)


def pad_hw(x, pad):
    """Zero-pad the two leading spatial axes of an H x W x C tensor."""
    if x.data.ndim != 3:
        raise DimensionError("pad_hw expects an H x W x C tensor")
    out_data = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))

    def bwd(g, t=x, p=pad):
        t._accum(g[p:-p, p:-p, :] if p else g)

    return Tensor._result(out_data, (x,), bwd)


def gelu(x):
    """Smooth tanh-form gaussian-error activation with analytic derivative."""
    v = x.data
    inner = _GELU_C * (v + _GELU_A * v**3)
    t = np.tanh(inner)
    out_data = 0.5 * v * (1.0 + t)

    def bwd(g, a=x, th=t, val=v):
        sech2 = 1.0 - th * th
        d = 0.5 * (1.0 + th) + 0.5 * val * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * val * val)
        a._accum(g * d)

    return Tensor._result(out_data, (x,), bwd)
