"""Float64 tensors with reverse-mode differentiation.

Every operation on a :class:`Tensor` that requires a gradient records its
parents and a vector-Jacobian product closure.  :func:`backward` walks that
record in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, DimensionError, ParameterError, UsageError

Array = np.ndarray

# BLAS picks different kernels for different row counts, so a sample's
# product can change in the last bit with its batch size.  Inside
# batch_invariant() forward products go through einsum, whose per-row
# reduction order is fixed.
_BATCH_INVARIANT = False


@contextlib.contextmanager
def batch_invariant():
    """Make forward products bitwise independent of batch size and row position."""
    global _BATCH_INVARIANT
    prev, _BATCH_INVARIANT = _BATCH_INVARIANT, True
    try:
        yield
    finally:
        _BATCH_INVARIANT = prev


def _mm(a: Array, w: Array) -> Array:
    if _BATCH_INVARIANT:
        return np.einsum("...k,km->...m", a, w)
    return a @ w


class Tensor:
    """Immutable-by-convention float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._vjp = _vjp

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
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic
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
        return _record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _record(data, parents, vjp):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(grad: Array, shape) -> Array:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _record(out, (a, b), vjp)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _record(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (0.5 * g / out,))


def relu(x) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is taken to be 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


# ----------------------------------------------------------------- structural


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise DataError(f"mean over empty axes {axes} of shape {a.shape}")
    return reduce_sum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# -------------------------------------------------------------- linear maps


def matmul(a, w) -> Tensor:
    """(N, Din) @ (Din, Dout) -> (N, Dout)."""
    a, w = as_tensor(a), as_tensor(w)
    if a.ndim != 2 or w.ndim != 2 or a.shape[1] != w.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {w.shape} do not align")
    return _record(_mm(a.data, w.data), (a, w), lambda g: (g @ w.data.T, a.data.T @ g))


def conv_output_shape(in_hw, kernel_hw, stride, padding):
    """Spatial output size and (low, high) padding per axis.

    Returns ``((H_out, W_out), ((pad_top, pad_bottom), (pad_left, pad_right)))``.
    SAME padding puts the odd leftover row/column on the high side.
    """
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding not in ("same", "valid"):
        raise ParameterError(f"padding must be 'same' or 'valid', got {padding!r}")
    out, pads = [], []
    for n, k in zip(in_hw, kernel_hw):
        if padding == "same":
            o = -(-n // stride)
            total = max((o - 1) * stride + k - n, 0)
            lo = total // 2
            pads.append((lo, total - lo))
        else:
            if k > n:
                raise DimensionError(f"kernel {tuple(kernel_hw)} larger than input {tuple(in_hw)}")
            o = (n - k) // stride + 1
            pads.append((0, 0))
        out.append(o)
    return tuple(out), tuple(pads)


def conv2d(x, k, stride=1, padding="same") -> Tensor:
    """NHWC cross-correlation with an (Kh, Kw, Cin, Cout) kernel."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4 or x.shape[3] != k.shape[2]:
        raise DimensionError(f"conv2d shapes {x.shape} and {k.shape} do not align")
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    (ho, wo), pads = conv_output_shape((h, w), (kh, kw), stride, padding)
    xp = np.pad(x.data, ((0, 0), pads[0], pads[1], (0, 0))) if padding == "same" else x.data
    s = stride

    def window(i, j):
        return xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]

    out = np.zeros((n, ho, wo, cout))
    for i in range(kh):
        for j in range(kw):
            out += _mm(window(i, j), k.data[i, j])

    def vjp(g):
        gx = np.zeros_like(xp)
        gk = np.empty_like(k.data)
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                gk[i, j] = window(i, j).reshape(-1, cin).T @ g2
                gx[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += g @ k.data[i, j].T
        if padding == "same":
            gx = gx[:, pads[0][0] : pads[0][0] + h, pads[1][0] : pads[1][0] + w, :]
        return gx, gk

    return _record(out, (x, k), vjp)


# --------------------------------------------------------------------- loss


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if n == 0:
        raise DataError("empty batch")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}); got range [{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - shifted[rows, labels])

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _record(np.asarray(loss), (logits,), vjp)


# ----------------------------------------------------------------- backward


def _topological(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> list[Array]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    ``wrt`` may contain leaves (parameters) or intermediate tensors of the
    graph.  Tensors the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    wanted = {id(t) for t in wrt}
    found: dict[int, Array] = {}
    grads: dict[int, Array] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in wanted:
            found[id(node)] = g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return [found[id(t)] if id(t) in found else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------------- rng


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical sequences everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def gaussian(shape, mean=0.0, std=1.0, rng: np.random.Generator | None = None) -> Tensor:
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    if rng is None:
        raise ParameterError("gaussian() needs an explicit rng")
    return Tensor(rng.standard_normal(shape) * std + mean)


def numeric_grad(f: Callable[[], float], x: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of ``f`` w.r.t. the array ``x`` (mutated, then restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g
