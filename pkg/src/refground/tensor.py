"""Dense float64 tensors with reverse-mode differentiation.

Operations build a graph only when at least one input requires a gradient.
``backward(loss)`` turns that graph into a :class:`Tape` (inputs strictly
before consumers) and replays it once in reverse.

Elementwise ops demand identical shapes. The only implicit broadcast is
:func:`add_bias` (trailing-dims bias, as in a linear layer); anything else
goes through an explicit :func:`expand`.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

from .errors import AxisOutOfRange, NonFiniteInput, NonScalarLoss, RefgroundError, ShapeMismatch

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return constant(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        if _is_scalar(other):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if _is_scalar(other):
            return shift(neg(self), float(other))
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if _is_scalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_scalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_pool(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def parameter(x) -> Tensor:
    return Tensor(x, requires_grad=True)


def _node(data: np.ndarray, parents: tuple, fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return (g / bd if a.requires_grad else None, -g * out / bd if b.requires_grad else None)

    return _node(out, (a, b), fn, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    return _node(a.data + c, (a,), lambda g: (g,), "shift")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), fn, "gelu")


def identity(a: Tensor) -> Tensor:
    return a


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "maximum")
    pick_a = a.data >= b.data
    return _node(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (g * pick_a, g * ~pick_a),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "minimum")
    pick_a = a.data <= b.data
    return _node(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (g * pick_a, g * ~pick_a),
        "minimum",
    )


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data > lo
    return _node(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


# ---------------------------------------------------------------- structure


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing dims of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim :] != b.shape:
        raise ShapeMismatch(f"bias {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g), "add_bias")


def expand(x: Tensor, shape: tuple) -> Tensor:
    """Explicit broadcast; gradient sums back over the broadcast axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot expand {x.shape} to {shape}") from exc
    nlead = len(shape) - x.ndim
    size1 = tuple(i + nlead for i, n in enumerate(x.shape) if n == 1 and shape[i + nlead] != 1)
    xshape = x.shape

    def fn(g):
        if nlead:
            g = g.sum(axis=tuple(range(nlead)))
        if size1:
            g = g.sum(axis=tuple(i - nlead for i in size1), keepdims=True)
        return (g.reshape(xshape),)

    return _node(out, (x,), fn, "expand")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared weight) or carries the same leading batch
    axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        ad, bd = a.data, b.data
        k, m = bd.shape

        def fn(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m) if b.requires_grad else None
            return ga, gb

        return _node(ad @ bd, (a, b), fn, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul batch axes: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), fn, "bmm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add_bias(y, bias)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    xshape = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {xshape} to {shape}") from exc
    return _node(out, (x,), lambda g: (g.reshape(xshape),), "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    rank = tensors[0].ndim
    if not -rank <= axis < rank:
        raise AxisOutOfRange(f"concat axis {axis} for rank {rank}")
    axis = axis % rank
    for t in tensors[1:]:
        if t.ndim != rank or t.shape[:axis] + t.shape[axis + 1 :] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1 :]:
            raise ShapeMismatch(f"concat: {t.shape} vs {tensors[0].shape} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn, "concat")


def _has_array(key) -> bool:
    if isinstance(key, tuple):
        return any(isinstance(k, (np.ndarray, list)) for k in key)
    return isinstance(key, (np.ndarray, list))


def getitem(x: Tensor, key) -> Tensor:
    xshape = x.shape
    fancy = _has_array(key)

    def fn(g):
        gx = np.zeros(xshape)
        if fancy:
            np.add.at(gx, key, g)
        else:
            gx[key] += g
        return (gx,)

    return _node(np.array(x.data[key]), (x,), fn, "getitem")


def scatter_rows(y: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Place rows of ``y`` at positions ``index`` (unique) of a zero tensor with ``n`` rows."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n,) + y.shape[1:])
    out[index] = y.data
    return _node(out, (y,), lambda g: (g[index],), "scatter_rows")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xshape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xshape),)

    return _node(np.asarray(out, dtype=np.float64), (x,), fn, "sum")


def mean_pool(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in axes:
            if not -x.ndim <= ax < x.ndim:
                raise AxisOutOfRange(f"mean axis {ax} for rank {x.ndim}")
        count = int(np.prod([x.shape[ax] for ax in axes]))
    else:
        count = x.data.size
    return scale(tsum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- softmax family


def _check_finite(z: np.ndarray):
    if not np.isfinite(z).all():
        raise NonFiniteInput("softmax input contains NaN or inf")


def softmax(z: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax. Entries where ``mask`` is False get exactly zero mass."""
    zd = z.data
    _check_finite(zd)
    if mask is not None:
        mask = np.broadcast_to(mask, zd.shape)
        shifted = np.where(mask, zd, -np.inf)
        m = np.max(shifted, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, zd, 0.0) - m), 0.0)
    else:
        e = np.exp(zd - np.max(zd, axis=axis, keepdims=True))
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (z,), fn, "softmax")


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    zd = z.data
    _check_finite(zd)
    shifted = zd - np.max(zd, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (z,), fn, "log_softmax")


# ---------------------------------------------------------------- backward


class Tape:
    """Differentiable ops reachable from a root, ordered inputs-first."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> list:
        order, visited = [], set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return order

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list:
        return [n for n in self.nodes if not n.parents]

    def replay(self):
        """Overwrite ``.grad`` of every leaf on the tape with d(root)/d(leaf)."""
        grads = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if not node.parents:
                node.grad = np.array(g, dtype=np.float64) if g is not None else np.zeros_like(node.data)
                continue
            if g is None:
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                prev = grads.get(k)
                grads[k] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> Tape:
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RefgroundError("loss does not depend on any tensor that requires a gradient")
    tape = Tape(loss)
    tape.replay()
    return tape
