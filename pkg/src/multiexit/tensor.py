"""Dense tensors with reverse-mode automatic differentiation.

Storage is float32 by default (float64 is supported and used by the
gradient-check tests); sum/mean reductions accumulate at 64 bit and cast
back to the storage dtype. Broadcasting is deliberately restricted to
bias addition and scalar operands, which keeps the gradient rules small.

Recording works through an explicit :class:`GradTape`. Operations executed
while a tape is live, with at least one `requires_grad` input, append a
node holding the saved arrays needed for the backward pass. `backward`
replays the tape once, in reverse order, and then marks it consumed.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, NumericError, ShapeError, TapeError

FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _current_tape():
    return getattr(_state, "tape", None)


class GradTape:
    """Ordered record of the primitive operations of one forward pass.

    Use as a context manager around the forward computation; call
    :func:`backward` on the resulting scalar loss while the tape is live.
    A tape can be replayed exactly once.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if _current_tape() is not None:
            raise TapeError("gradient tapes do not nest")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def _record(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional array, optionally participating in the gradient tape.

    Tensors are immutable once created; the exceptions are gradient
    accumulation into ``grad`` during backward and explicit parameter
    updates by an optimizer between forward passes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node_index")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._node_index = None

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

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Return a tensor sharing this data but cut from the tape."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars go through the dedicated scalar ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def flatten(self):
        return flatten(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def log(self):
        return log(self)

    def backward(self):
        backward(self)


def parameter(data, dtype=np.float32):
    """Create a trainable leaf tensor."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _traced(out, inputs, backward_fn):
    """Attach `out` to the live tape when any input needs gradients."""
    tape = _current_tape()
    if tape is None or tape.consumed:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    node = _Node(tuple(inputs), out, backward_fn)
    out._tape = tape
    out._node_index = tape._record(node)
    return out


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss over its tape.

    Visits each recorded node exactly once in reverse order. Every
    `requires_grad` tensor reachable from the loss ends up with a
    populated ``grad``. The tape is consumed afterwards; a second call
    without a fresh forward pass raises :class:`TapeError`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced under a live gradient tape")
    if tape.consumed:
        raise TapeError("tape already consumed; rerun the forward pass before backward")
    tape.consumed = True

    pending = {loss._node_index: np.ones_like(loss.data)}
    for idx in range(len(tape.nodes) - 1, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        node.output.grad = g
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is tape and t._node_index is not None:
                prev = pending.get(t._node_index)
                pending[t._node_index] = gi if prev is None else prev + gi
            else:
                t.grad = gi if t.grad is None else t.grad + gi
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# elementwise and scalar primitives
# ---------------------------------------------------------------------------


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(
            f"{op}: operand shapes {a.shape} and {b.shape} differ",
            expected=a.shape,
            actual=b.shape,
        )


def add(a, b):
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _traced(out, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return _traced(out, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _traced(out, (a, b), lambda g: (g * bd, g * ad))


def add_scalar(a, s):
    s = float(s)
    out = Tensor(a.data + np.asarray(s, dtype=a.data.dtype))
    return _traced(out, (a,), lambda g: (g,))


def mul_scalar(a, s):
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.data.dtype))
    return _traced(out, (a,), lambda g: (g * np.asarray(s, dtype=g.dtype),))


def bias_add(x, b):
    """Add a per-channel bias: [N,C,H,W] + [C] or [N,K] + [K]."""
    if b.ndim != 1:
        raise ShapeError(f"bias must be 1-D, got shape {b.shape}")
    if x.ndim == 4:
        if b.shape[0] != x.shape[1]:
            raise ShapeError(
                f"bias length {b.shape[0]} does not match channel count {x.shape[1]}"
            )
        out = Tensor(x.data + b.data[None, :, None, None])
        return _traced(out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))))
    if x.ndim == 2:
        if b.shape[0] != x.shape[1]:
            raise ShapeError(
                f"bias length {b.shape[0]} does not match feature count {x.shape[1]}"
            )
        out = Tensor(x.data + b.data[None, :])
        return _traced(out, (x, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"bias_add expects a 2-D or 4-D input, got shape {x.shape}")


def relu(x):
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0
    return _traced(out, (x,), lambda g: (g * mask,))


def sigmoid(x):
    # clip keeps exp() finite; sigmoid saturates far before +-60 anyway
    z = np.clip(x.data, -60.0, 60.0)
    s = 1.0 / (1.0 + np.exp(-z))
    out = Tensor(s.astype(x.data.dtype, copy=False))
    sd = out.data
    return _traced(out, (x,), lambda g: (g * sd * (1.0 - sd),))


def log(x):
    with np.errstate(divide="ignore"):
        out = Tensor(np.log(x.data))
    xd = x.data
    return _traced(out, (x,), lambda g: (g / xd,))


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}",
            expected=a.shape[1],
            actual=b.shape[0],
        )
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _traced(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------


def reshape(x, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    return _traced(out, (x,), lambda g: (g.reshape(orig),))


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation, cast back to storage dtype)
# ---------------------------------------------------------------------------


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False):
    axes = _normalize_axis(axis, x.ndim)
    out_data = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64)
    out = Tensor(out_data.astype(x.data.dtype))
    shape = x.shape

    def bwd(g):
        return (_expand_reduced(g, shape, axes, keepdims).astype(g.dtype, copy=False),)

    return _traced(out, (x,), bwd)


def reduce_mean(x, axis=None, keepdims=False):
    axes = _normalize_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out_data = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64) / count
    out = Tensor(out_data.astype(x.data.dtype))
    shape = x.shape

    def bwd(g):
        spread = _expand_reduced(g, shape, axes, keepdims) / count
        return (spread.astype(g.dtype, copy=False),)

    return _traced(out, (x,), bwd)


# ---------------------------------------------------------------------------
# softmax family (last axis, max-stabilized)
# ---------------------------------------------------------------------------


def _check_finite(name, arr):
    bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
    if bad:
        raise NumericError(f"{name}: input has {bad} non-finite element(s)", bad_count=bad)


def softmax(x):
    """Row-normalized exponentials along the last axis.

    Stabilized by max subtraction; rows of the result sum to 1 within
    float tolerance. Non-finite inputs raise :class:`NumericError`.
    """
    _check_finite("softmax", x.data)
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    denom = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    s = (e / denom).astype(x.data.dtype)
    out = Tensor(s)
    sd = out.data

    def bwd(g):
        dot = np.sum(g * sd, axis=-1, keepdims=True)
        return (sd * (g - dot),)

    return _traced(out, (x,), bwd)


def log_softmax(x):
    """log(softmax(x)) along the last axis via log-sum-exp."""
    _check_finite("log_softmax", x.data)
    m = np.max(x.data, axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True, dtype=np.float64))
    out = Tensor((z - lse).astype(x.data.dtype))
    soft = np.exp(out.data)

    def bwd(g):
        total = np.sum(g, axis=-1, keepdims=True)
        return (g - soft * total,)

    return _traced(out, (x,), bwd)
