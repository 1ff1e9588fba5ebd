"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable primitive returns a :class:`Tensor` that remembers its
parents and a backward rule.  Calling :func:`backward` on a scalar loss
collects the reachable operations into a :class:`Tape` ordered by creation,
then replays the backward rules in reverse, accumulating gradients.

The module also carries the pieces of an optimization loop that live next to
the tape: the Adam optimizer, inverted dropout, a seeded random stream and a
central finite-difference gradient checker.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .exceptions import ConfigError, DatasetError, UsageError

__all__ = [
    "Tensor", "Tape", "RngStream", "AdamState", "no_grad", "backward",
    "add", "add_row", "sub", "mul", "div", "neg", "matmul", "transpose",
    "element", "relu", "exp", "log", "sqrt", "sigmoid", "row_softmax", "sum", "mean",
    "mean_rows", "concat_cols", "rowwise_max_over_set", "scalar_mul",
    "gather_rows", "segment_sum", "segment_mean", "segment_softmax_weights",
    "segment_softmax_weighted_sum", "cross_entropy_logits",
    "binary_cross_entropy_logits", "dropout", "adam_step", "grad_check",
]

_GRAD_ENABLED = contextvars.ContextVar("mlap_grad_enabled", default=True)
_SEQ = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable operation recording inside the block."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    """Dense float64 array of rank <= 2 with an optional gradient buffer.

    Parameters
    ----------
    values
        Anything ``numpy.asarray`` accepts.  The data is copied.
    requires_grad
        Whether gradients flow into this tensor.  Leaf tensors with
        ``requires_grad=True`` are trainable parameters; their gradient
        buffer starts at zero and accumulates across backward passes until
        :meth:`zero_grad` is called.
    """

    __slots__ = ("values", "grad", "requires_grad", "name",
                 "_parents", "_backward", "_seq")

    def __init__(self, values, requires_grad=False, name=None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim > 2:
            raise ConfigError(f"Tensor: rank {arr.ndim} > 2 not supported")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_SEQ)

    @classmethod
    def _from_op(cls, values, parents, backward_fn):
        out = cls.__new__(cls)
        out.values = values
        out.name = None
        out._seq = next(_SEQ)
        track = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.grad = None
        if track:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.values.reshape(-1)[0]) if self.size == 1 else _raise_item(self)

    def numpy(self):
        return self.values

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self):
        return Tensor(self.values)

    def backward(self):
        backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Recorded operations reachable from a loss, in creation order.

    Creation order is a valid topological order: an operation's inputs
    always exist before the operation runs.
    """

    def __init__(self, loss):
        seen = set()
        ops = []
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            ops.append(node)
            stack.extend(node._parents)
        ops.sort(key=lambda t: t._seq)
        self.ops = ops
        self.loss = loss

    def __len__(self):
        return len(self.ops)

    def backward(self):
        loss = self.loss
        for node in self.ops:
            node.grad = None
        loss.grad = np.ones_like(loss.values)
        # arrays already installed as some node's grad; anything else that is
        # a fresh, correctly shaped base array can be adopted without a copy
        owned = {id(loss.grad)}
        for node in reversed(self.ops):
            if node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is not None:
                    parent.grad += g
                    continue
                if (isinstance(g, np.ndarray) and g.base is None and g.shape == parent.shape
                        and g.dtype == np.float64 and id(g) not in owned):
                    parent.grad = g
                else:
                    parent.grad = np.array(np.broadcast_to(g, parent.shape), dtype=np.float64)
                owned.add(id(parent.grad))


def backward(loss):
    """Populate ``.grad`` of every tensor reachable from a scalar ``loss``."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise UsageError(f"backward() needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise UsageError("backward() on a tensor that does not require grad")
    Tape(loss).backward()


# ---------------------------------------------------------------------------
# elementwise and broadcasting primitives

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.values + b.values, (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def add_row(a, row):
    """Add a ``[d]`` or ``[1, d]`` row vector to every row of ``a [N, d]``."""
    a, row = _as_tensor(a), _as_tensor(row)
    if a.ndim != 2 or row.shape not in ((a.shape[1],), (1, a.shape[1])):
        raise ConfigError(f"add_row: cannot add row {row.shape} to matrix {a.shape}")
    return add(a, row)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.values - b.values, (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.values, b.values
    return Tensor._from_op(av * bv, (a, b),
                           lambda g: (_unbroadcast(g * bv, av.shape),
                                      _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.values, b.values
    out = av / bv
    return Tensor._from_op(out, (a, b),
                           lambda g: (_unbroadcast(g / bv, av.shape),
                                      _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    return Tensor._from_op(-a.values, (a,), lambda g: (-g,))


def scalar_mul(a, c):
    """Multiply by a Python number (not differentiated)."""
    c = float(c)
    return Tensor._from_op(a.values * c, (a,), lambda g: (g * c,))


def relu(a):
    out = np.maximum(a.values, 0.0)
    return Tensor._from_op(out, (a,), lambda g: (g * (out > 0),))


def exp(a):
    out = np.exp(a.values)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a):
    av = a.values
    return Tensor._from_op(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(a.values)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x):
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(a.values)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# matrix primitives

def matmul(a, b):
    """``[N, k] @ [k, m]`` or ``[N, k] @ [k]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def bw(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return Tensor._from_op(av @ bv, (a, b), bw)


def element(a, i):
    """Entry ``i`` of a vector as a 0-d tensor."""
    if a.ndim != 1 or not -a.shape[0] <= i < a.shape[0]:
        raise ConfigError(f"element: index {i} invalid for shape {a.shape}")
    n = a.shape[0]

    def bw(g):
        out = np.zeros(n)
        out[i] = g
        return (out,)

    return Tensor._from_op(np.asarray(a.values[i]), (a,), bw)


def transpose(a):
    if a.ndim != 2:
        raise ConfigError(f"transpose: expected a matrix, got shape {a.shape}")
    return Tensor._from_op(a.values.T, (a,), lambda g: (g.T,))


def row_softmax(a):
    """Softmax along the last axis, max-shifted for stability."""
    z = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return Tensor._from_op(s, (a,),
                           lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def sum(a):  # noqa: A001 - mirrors numpy naming
    """Sum of all entries, as a 0-d tensor."""
    shape = a.shape
    return Tensor._from_op(np.asarray(a.values.sum()), (a,),
                           lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    n = a.size
    shape = a.shape
    return Tensor._from_op(np.asarray(a.values.mean()), (a,),
                           lambda g: (np.full(shape, g / n),))


def mean_rows(a):
    """Column means of a matrix: ``[N, d] -> [d]``."""
    if a.ndim != 2:
        raise ConfigError(f"mean_rows: expected a matrix, got shape {a.shape}")
    n = a.shape[0]
    return Tensor._from_op(a.values.mean(axis=0), (a,),
                           lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def concat_cols(tensors: Sequence[Tensor]):
    """Concatenate matrices along columns."""
    if not tensors:
        raise ConfigError("concat_cols: empty input")
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1 or any(t.ndim != 2 for t in tensors):
        raise ConfigError(f"concat_cols: mismatched shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return Tensor._from_op(np.concatenate([t.values for t in tensors], axis=1),
                           tuple(tensors), bw)


def rowwise_max_over_set(tensors: Sequence[Tensor]):
    """Elementwise maximum across same-shaped tensors.

    The gradient goes to the first tensor attaining the maximum.
    """
    if not tensors:
        raise ConfigError("rowwise_max_over_set: empty input")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ConfigError(f"rowwise_max_over_set: mismatched shapes {sorted(shapes)}")
    stacked = np.stack([t.values for t in tensors])
    winner = stacked.argmax(axis=0)

    def bw(g):
        return tuple(np.where(winner == i, g, 0.0) for i in range(len(tensors)))

    return Tensor._from_op(stacked.max(axis=0), tuple(tensors), bw)


# ---------------------------------------------------------------------------
# row gathers and segment reductions

def _scatter_rows(values, index, num_rows):
    """``out[index[i]] += values[i]`` via a sparse 0/1 matrix product."""
    m = len(index)
    if m == 0:
        return np.zeros((num_rows,) + values.shape[1:])
    sel = sparse.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(num_rows, m))
    return np.asarray(sel @ values)


def gather_rows(a, index):
    """``a[index]`` for an integer row index; backward scatters and adds."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    return Tensor._from_op(a.values[index], (a,),
                           lambda g: (_scatter_rows(g, index, n),))


def _check_segments(op, segments, num_rows, num_segments):
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (num_rows,):
        raise ConfigError(f"{op}: segments shape {segments.shape} does not match {num_rows} rows")
    if num_rows and (segments.min() < 0 or segments.max() >= num_segments):
        raise ConfigError(f"{op}: segment ids outside [0, {num_segments})")
    return segments


def segment_sum(h, segments, num_segments):
    """Per-segment row sums: ``[N, d] -> [G, d]``."""
    segments = _check_segments("segment_sum", segments, h.shape[0], num_segments)
    return Tensor._from_op(_scatter_rows(h.values, segments, num_segments), (h,),
                           lambda g: (g[segments],))


def segment_mean(h, segments, num_segments):
    segments = _check_segments("segment_mean", segments, h.shape[0], num_segments)
    counts = np.bincount(segments, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise DatasetError("segment_mean: empty segment")
    inv = (1.0 / counts)[:, None] if h.ndim == 2 else 1.0 / counts
    out = _scatter_rows(h.values, segments, num_segments) * inv
    return Tensor._from_op(out, (h,), lambda g: ((g * inv)[segments],))


def segment_softmax_weights(scores, segments, num_segments):
    """Softmax of ``scores`` within each segment (plain numpy, no tape)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    segments = np.asarray(segments, dtype=np.int64)
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segments, scores)
    e = np.exp(scores - seg_max[segments])
    denom = np.zeros(num_segments)
    np.add.at(denom, segments, e)
    return e / denom[segments]


def segment_softmax_weighted_sum(h, scores, segments, num_segments):
    """Attention-weighted per-segment sum of rows.

    For every segment ``g`` returns ``sum_n softmax(scores)_n * h[n]`` with the
    softmax taken over the rows of ``g`` only.  ``scores`` is ``[N, 1]`` or
    ``[N]``; the result is ``[G, d]`` and is differentiable in ``h`` and
    ``scores``.
    """
    n = h.shape[0]
    segments = _check_segments("segment_softmax_weighted_sum", segments, n, num_segments)
    if scores.size != n:
        raise ConfigError(f"segment_softmax_weighted_sum: {scores.shape} scores for {n} rows")
    if np.any(np.bincount(segments, minlength=num_segments) == 0):
        raise DatasetError("segment_softmax_weighted_sum: empty segment")
    a = segment_softmax_weights(scores.values, segments, num_segments)
    hv = h.values
    out = _scatter_rows(hv * a[:, None], segments, num_segments)
    score_shape = scores.shape

    def bw(g):
        g_rows = g[segments]
        grad_h = g_rows * a[:, None]
        da = np.einsum("ij,ij->i", g_rows, hv)
        weighted = np.zeros(num_segments)
        np.add.at(weighted, segments, a * da)
        grad_s = a * (da - weighted[segments])
        return grad_h, grad_s.reshape(score_shape)

    return Tensor._from_op(out, (h, scores), bw)


# ---------------------------------------------------------------------------
# fused losses

def cross_entropy_logits(logits, labels):
    """Mean multiclass cross-entropy computed from logits via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.values
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ConfigError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse - shifted[rows, labels])
    m = z.shape[0]

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / m,)

    return Tensor._from_op(np.asarray(loss), (logits,), bw)


def binary_cross_entropy_logits(logits, targets):
    """Mean binary cross-entropy from logits, stable for any magnitude."""
    y = np.asarray(targets, dtype=np.float64)
    z = logits.values
    if z.shape != y.shape:
        raise ConfigError(f"binary_cross_entropy: logits {z.shape} vs targets {y.shape}")
    loss = np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))
    m = z.size
    return Tensor._from_op(np.asarray(loss), (logits,),
                           lambda g: (g * (_sigmoid(z) - y) / m,))


# ---------------------------------------------------------------------------
# randomness, dropout, optimizer

def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ConfigError(f"RngStream: negative key {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


class RngStream:
    """Seeded random stream backed by PCG64.

    The stream is keyed by ``(seed, *keys)`` through ``numpy.random.SeedSequence``,
    so child streams for distinct purposes (``child("dropout", epoch)``) are
    independent of one another and of the order in which they are created.
    String keys are reduced with CRC-32.
    """

    def __init__(self, seed, *keys):
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError(f"RngStream: seed {seed} is not an unsigned 64-bit integer")
        self.seed = seed
        self.keys = tuple(keys)
        words = [seed & 0xFFFFFFFF, seed >> 32] + [_key_to_int(k) for k in keys]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def child(self, *keys):
        return RngStream(self.seed, *self.keys, *keys)

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, keys={self.keys})"


def dropout(x, p, mode="train", rng=None):
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout: probability {p} outside [0, 1)")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout: unknown mode {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in train mode needs an RngStream")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._from_op(x.values * mask, (x,), lambda g: (g * mask,))


@dataclass
class AdamState:
    """Moment buffers and step counter for Adam."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _named(params):
    if isinstance(params, Mapping):
        return list(params.items())
    return list(enumerate(params))


def adam_step(params, state: AdamState, lr: float):
    """Apply one bias-corrected Adam update in place, then zero the grads."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for key, p in _named(params):
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.values)
            state.v[key] = np.zeros_like(p.values)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.values)


def grad_check(f: Callable[[], Tensor], params, fd_step: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` must rebuild its scalar output from the current parameter values on
    every call and be deterministic.  The relative error of one entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    named = _named(params)
    for _, p in named:
        p.zero_grad()
    out = f()
    if out.requires_grad:
        backward(out)
    worst = 0.0
    for _, p in named:
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + fd_step
                up = f().item()
                flat[i] = orig - fd_step
                down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * fd_step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
