"""Dense n-dimensional arrays with reverse-mode automatic differentiation.

Every differentiable operation records a node on an implicit linear tape
(creation order is a topological order of the graph). ``backward`` replays
the tape once, in reverse, and deposits gradients on leaf tensors that were
created with ``requires_grad=True``. Nodes are consumed by the replay, so a
second ``backward`` without re-running the forward pass raises ``TapeError``.

Numerical contract: forward operations on finite inputs must produce finite
outputs; a NaN or Inf is raised as ``NumericalError`` instead of propagating.
The one sanctioned source of non-finite values is ``masked_fill`` with an
infinite fill value, which exists to feed ``softmax`` masked logits.
Reductions delegate to numpy's deterministic pairwise summation, so identical
inputs give bit-identical outputs on a fixed platform.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float64

_SEQ = itertools.count()


class TensorError(Exception):
    """Base class for tensor-library errors."""


class ShapeError(TensorError):
    """Operand shapes violate an operation's contract."""


class NumericalError(TensorError):
    """A forward op produced NaN/Inf from finite inputs."""


class DegenerateSliceError(NumericalError):
    """Softmax over a slice that is entirely -inf."""


class EmptyReductionError(ShapeError):
    """Reduction over a zero-length axis."""


class TapeError(TensorError):
    """Misuse of the autodiff tape (non-scalar loss, repeated backward)."""


class TapeNode:
    """One recorded operation: inputs, a backward closure, and a sequence id."""

    __slots__ = ("inputs", "backward_fn", "seq", "op")

    def __init__(self, inputs: tuple, backward_fn: Callable, op: str):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_SEQ)
        self.op = op


class Tensor:
    """Contiguous float array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None, node: Optional[TapeNode] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # ascontiguousarray would promote 0-d to (1,)
        self.data = arr
        self.requires_grad = bool(requires_grad) or node is not None
        self.grad: Optional[np.ndarray] = None
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data!r}"

    # operator sugar; all arithmetic goes through the traced functions below
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

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _pair(a, b):
    """Coerce operands; python-number constants adopt the tensor's dtype so
    f32 graphs are not silently promoted to f64."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def rng(seed: int) -> np.random.Generator:
    """Seeded generator; all randomness in the package flows through these."""
    return np.random.default_rng(seed)


def _require_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op}: non-finite values in output (NaN/Inf surfaced, not propagated)")


def _trace(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable,
           op: str, check_finite: bool = True) -> Tensor:
    if check_finite:
        _require_finite(data, op)
    node = None
    if any(t.requires_grad for t in inputs):
        node = TapeNode(tuple(inputs), backward_fn, op)
    return Tensor(data, node=node)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over broadcast dimensions back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; fills ``grad`` on leaf tensors."""
    if loss.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    topo = []
    visited = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in visited:
            continue
        visited.add(id(t))
        if t.node is not None:
            if t.node.backward_fn is None:
                raise TapeError("tape already consumed: re-run the forward pass before calling backward again")
            topo.append(t)
            stack.extend(t.node.inputs)
    topo.sort(key=lambda t: t.node.seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for t in topo:
        g = grads.pop(id(t), None)
        node = t.node
        if g is None:
            node.backward_fn = None
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            if inp.node is not None:
                acc = grads.get(id(inp))
                grads[id(inp)] = ig if acc is None else acc + ig
            elif inp.requires_grad:
                inp.grad = np.array(ig) if inp.grad is None else inp.grad + ig
        node.backward_fn = None  # consume the tape node


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _trace(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _trace(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _trace(out, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bwd(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _trace(out, (a, b), bwd, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return _trace(-a.data, (a,), bwd, "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _trace(out, (a,), bwd, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _trace(out, (a,), bwd, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _trace(out, (a,), bwd, "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _trace(out, (a,), bwd, "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _trace(out, (a,), bwd, "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # stable: max(x,0) + log1p(exp(-|x|))
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bwd(g):
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ez = np.exp(a.data[~pos])
        s[~pos] = ez / (1.0 + ez)
        return (g * s,)

    return _trace(out, (a,), bwd, "softplus")


# ---------------------------------------------------------------------------
# contractions and normalizations


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _trace(out, (a, b), bwd, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; -inf entries map to exactly 0.

    A slice that is entirely -inf has no well-defined softmax and raises
    ``DegenerateSliceError``; callers that mask whole rows decide the fallback.
    """
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateSliceError("softmax: slice is entirely -inf")
    z = np.exp(x - m)
    out = z / np.sum(z, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _trace(out, (a,), bwd, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateSliceError("log_softmax: slice is entirely -inf")
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        p = np.exp(out)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _trace(out, (a,), bwd, "log_softmax", check_finite=False)

# log_softmax of a masked (-inf) logit is legitimately -inf; downstream use
# multiplies by a zero one-hot there, so the check is on the caller.


def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    for ax in axes:
        if a.shape[ax] == 0:
            raise EmptyReductionError(f"reduce_sum over zero-length axis {ax} of shape {a.shape}")
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _trace(out, (a,), bwd, "reduce_sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        if a.shape[ax] == 0:
            raise EmptyReductionError(f"reduce_mean over zero-length axis {ax} of shape {a.shape}")
        n *= a.shape[ax]
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _trace(out, (a,), bwd, "reduce_mean")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _trace(out, (a,), bwd, "reshape", check_finite=False)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _trace(out, (a,), bwd, "permute", check_finite=False)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    order = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, order)


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _trace(out, tuple(ts), bwd, "concatenate", check_finite=False)


def pad_zeros(a, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` is a per-axis list of (before, after) pairs."""
    a = as_tensor(a)
    pad_width = [tuple(p) for p in pad_width]
    out = np.pad(a.data, pad_width)
    sl = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, a.shape))

    def bwd(g):
        return (np.ascontiguousarray(g[sl]),)

    return _trace(out, (a,), bwd, "pad_zeros", check_finite=False)


def index(a, key) -> Tensor:
    """Basic (slice/int) indexing with gradient scatter into the source shape."""
    a = as_tensor(a)
    out = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _trace(np.ascontiguousarray(out), (a,), bwd, "index", check_finite=False)


def gather(a, idx: np.ndarray, axis: int) -> Tensor:
    """take_along_axis with an integer index array; duplicates accumulate on backward."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.ndim != a.ndim:
        raise ShapeError(f"gather: index rank {idx.ndim} must match input rank {a.ndim}")
    out = np.take_along_axis(a.data, idx, axis=axis)

    def bwd(g):
        full = np.zeros_like(a.data)
        grids = list(np.indices(idx.shape))
        grids[axis] = idx
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _trace(out, (a,), bwd, "gather", check_finite=False)


def masked_fill(a, keep: np.ndarray, value: float) -> Tensor:
    """Where ``keep`` is True pass input through, elsewhere write ``value``.

    The fill value may be -inf (mask-before-softmax); gradient flows only
    through kept entries.
    """
    a = as_tensor(a)
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, a.data, value)

    def bwd(g):
        return (_unbroadcast(np.where(keep, g, 0.0), a.shape),)

    return _trace(out, (a,), bwd, "masked_fill", check_finite=False)
