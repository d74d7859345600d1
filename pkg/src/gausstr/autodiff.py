"""Dense reverse-mode autodiff over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape`.  A tensor is
tracked when it requires grad or was produced by a recorded node; ops whose
inputs are all untracked run eagerly and record nothing, so inference code
can use the same functions without a tape.

Broadcasting is explicit: both operands must have the same rank and every
dimension must match or be 1.  Python scalars are accepted as constants.
"""
from __future__ import annotations

import itertools

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_TAPES: list["Tape"] = []
_IDS = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tracked", "_uid", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tracked = self.requires_grad
        self._uid = next(_IDS)

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

    def detach(self):
        return Tensor(self.data)

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)


class Node:
    __slots__ = ("index", "op", "inputs", "output", "backward")

    def __init__(self, index, op, inputs, output, backward):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        top = _TAPES.pop()
        assert top is self

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward):
        self.nodes.append(Node(len(self.nodes), op, inputs, output, backward))

    def ops(self):
        return [n.op for n in self.nodes]

    def gradient(self, loss, leaves):
        grads = backward(self, loss)
        return [grads.get(leaf, np.zeros(leaf.shape)) for leaf in leaves]


def active_tape():
    return _TAPES[-1] if _TAPES else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(op, inputs, out_data, backward_fn):
    """Wrap ``out_data`` in a Tensor and record it if any input is tracked.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    (or None) per input.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.record(op, tuple(inputs), out, backward_fn)
    return out


def backward(tape, loss):
    """Reverse sweep over ``tape``; returns {leaf tensor: gradient array}.

    Leaves are tensors created with requires_grad=True.  The .grad attribute
    of each reached leaf is also set.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._tracked:
        raise ContractError("loss is not reachable from any tracked leaf")
    grads = {loss._uid: np.ones(loss.shape)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output._uid, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t._tracked:
                continue
            if gi.shape != t.shape:
                raise ContractError(
                    f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
            if t._uid in grads:
                grads[t._uid] = grads[t._uid] + gi
            else:
                grads[t._uid] = gi
            if t.requires_grad:
                leaves[t._uid] = t
    out = {}
    for uid, t in leaves.items():
        g = grads.get(uid, np.zeros(t.shape))
        t.grad = g
        out[t] = g
    if loss.requires_grad:
        loss.grad = np.ones(loss.shape)
        out[loss] = loss.grad
    return out


# --- broadcasting helpers -------------------------------------------------

def _coerce_pair(a, b):
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if not a_t and np.ndim(a) == 0:
        a = Tensor(np.full((1,) * b.ndim, float(a)))
    if not b_t and np.ndim(b) == 0:
        b = Tensor(np.full((1,) * a.ndim, float(b)))
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim:
        raise DimensionError(f"rank mismatch {a.shape} vs {b.shape}; expand singleton dims explicitly")
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")
    return a, b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# --- binary elementwise ----------------------------------------------------

def add(a, b):
    a, b = _coerce_pair(a, b)
    return record_op("add", (a, b), a.data + b.data,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _coerce_pair(a, b)
    return record_op("sub", (a, b), a.data - b.data,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _coerce_pair(a, b)
    return record_op("mul", (a, b), a.data * b.data,
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _coerce_pair(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return record_op("div", (a, b), out,
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * out / b.data, b.shape)))


# --- unary elementwise -----------------------------------------------------

def neg(x):
    x = as_tensor(x)
    return record_op("neg", (x,), -x.data, lambda g: (-g,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return record_op("exp", (x,), out, lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return record_op("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(x.data)
    if np.any(out == 0):
        raise DomainError("sqrt at zero has no finite derivative")
    return record_op("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def sigmoid(x):
    x = as_tensor(x)
    # branch-free stable form
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return record_op("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return record_op("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def sin(x):
    x = as_tensor(x)
    return record_op("sin", (x,), np.sin(x.data), lambda g: (g * np.cos(x.data),))


def cos(x):
    x = as_tensor(x)
    return record_op("cos", (x,), np.cos(x.data), lambda g: (-g * np.sin(x.data),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return record_op("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def absolute(x):
    x = as_tensor(x)
    return record_op("abs", (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def clip(x, lo, hi):
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return record_op("clip", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


# --- linear algebra / reductions ------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul needs equal-rank >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return record_op("matmul", (a, b), a.data @ b.data, bw)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op("sum", (x,), out, bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


def reshape(x, shape):
    x = as_tensor(x)
    return record_op("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op("transpose", (x,), np.transpose(x.data, axes),
                     lambda g: (np.transpose(g, inv),))


def index(x, idx):
    """Basic slicing, or an integer index array along axis 0."""
    x = as_tensor(x)
    out = x.data[idx]

    def bw(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return record_op("index", (x,), out, bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op("concat", tuple(tensors),
                     np.concatenate([t.data for t in tensors], axis=axis), bw)


def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record_op("softmax", (x,), out, bw)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return record_op("log_softmax", (x,), out,
                     lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis; gamma/beta have shape (1,...,1,C)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = g * gamma.data
        n = x.shape[-1]
        dx = inv / n * (n * gx - gx.sum(-1, keepdims=True)
                        - xhat * (gx * xhat).sum(-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return record_op("layer_norm", (x, gamma, beta), out, bw)


def normalize_rows(x, eps=0.0):
    """x / ||x|| along the last axis."""
    x = as_tensor(x)
    return x / sqrt(tsum(x * x, axis=-1, keepdims=True) + eps)
