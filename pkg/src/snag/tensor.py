"""Small reverse-mode autodiff over dense float64 numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
backward rule. :func:`backward` topologically sorts the graph reachable from
a scalar loss (the :class:`Tape`) and replays the rules in reverse.

Sparse message passing is expressed with segment ops driven by integer index
arrays (see :class:`Segments`), so no sparse tensor type is needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _as_array(x) -> np.ndarray:
    return np.array(x, dtype=np.float64)


class Tensor:
    # make ndarray (op) Tensor dispatch to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op: str = "leaf"):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(_as_array(data), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_as_array(x))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, rule) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)
    return _make(a.data * scale, (a,), "leaky_relu", lambda g: (g * scale,))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    pos = a.data > 0
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, neg_part)
    return _make(out, (a,), "elu", lambda g: (g * np.where(pos, 1.0, neg_part + alpha),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


_sigmoid = expit


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def maximum(*xs: Tensor) -> Tensor:
    """Elementwise maximum over equally shaped tensors; ties go to the earliest."""
    if not xs:
        raise ValueError("maximum: needs at least one tensor")
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ValueError(f"maximum: shape mismatch {xs[0].shape} vs {x.shape}")
    stacked = np.stack([x.data for x in xs])
    winner = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]
    return _make(out, xs, "maximum", lambda g: tuple(g * (winner == i) for i in range(len(xs))))


# ---------------------------------------------------------------- linear algebra / shape

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def rule(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), "matmul", rule)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ValueError("concat: empty input")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax):
            raise ValueError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), "concat",
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def index_select(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing, ``a[index]``."""
    out = np.array(a.data[index], dtype=np.float64)
    basic = _is_basic(index)

    def rule(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), "index", rule)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")
    n = a.shape[0]

    def rule(g):
        flat = g.reshape(len(idx), -1)
        acc = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx))) @ flat
        return (np.asarray(acc).reshape((n,) + a.shape[1:]),)

    return _make(a.data[idx], (a,), "gather_rows", rule)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), "sum", rule)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def lstm_step(gates: Tensor, h: Tensor, c: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Fused LSTM update from pre-activation gates, returning ``[h_new | c_new]``.

    ``gates`` is (N, 4H) in input, forget, cell, output order. Rows whose
    ``mask`` entry is false keep their previous ``h`` and ``c``.
    """
    n, hidden = h.shape
    if gates.shape != (n, 4 * hidden) or c.shape != (n, hidden):
        raise ValueError(f"lstm_step: gates {gates.shape}, h {h.shape}, c {c.shape} are inconsistent")
    a = gates.data
    i = _sigmoid(a[:, :hidden])
    f = _sigmoid(a[:, hidden:2 * hidden])
    g = np.tanh(a[:, 2 * hidden:3 * hidden])
    o = _sigmoid(a[:, 3 * hidden:])
    c_new = f * c.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    m = np.ones((n, 1)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(n, 1)
    keep = 1.0 - m
    out = np.concatenate([m * h_new + keep * h.data, m * c_new + keep * c.data], axis=1)

    def rule(grad):
        dh_out, dc_out = grad[:, :hidden], grad[:, hidden:]
        dh = m * dh_out
        dc = m * dc_out + dh * o * (1.0 - tc * tc)
        d_gates = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c.data * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        return d_gates, keep * dh_out, dc * f + keep * dc_out

    return _make(out, (gates, h, c), "lstm_step", rule)


# ---------------------------------------------------------------- softmax family

def row_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, (a,), "row_softmax",
                 lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _make(out, (a,), "log_softmax",
                 lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy over the rows selected by ``mask``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: labels shape {labels.shape} vs logits {logits.shape}")
    rows = np.arange(n) if mask is None else np.flatnonzero(mask)
    if len(rows) == 0:
        raise ValueError("softmax_cross_entropy: empty mask")
    y = labels[rows]
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {c})")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = -logp[np.arange(len(rows)), y].mean()

    def rule(g):
        full = np.zeros_like(logits.data)
        d = np.exp(logp)
        d[np.arange(len(rows)), y] -= 1.0
        full[rows] = d * (g / len(rows))
        return (full,)

    return _make(np.asarray(value), (logits,), "softmax_cross_entropy", rule)


def sigmoid_binary_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean per-label binary cross-entropy with logits over masked rows."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ValueError(f"sigmoid_binary_cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if np.any((targets != 0) & (targets != 1)):
        raise ValueError("sigmoid_binary_cross_entropy: targets must be 0/1")
    rows = np.arange(logits.shape[0]) if mask is None else np.flatnonzero(mask)
    if len(rows) == 0:
        raise ValueError("sigmoid_binary_cross_entropy: empty mask")
    x, y = logits.data[rows], targets[rows]
    value = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()

    def rule(g):
        full = np.zeros_like(logits.data)
        full[rows] = (_sigmoid(x) - y) * (g / x.size)
        return (full,)

    return _make(np.asarray(value), (logits,), "sigmoid_bce", rule)


# ---------------------------------------------------------------- segment ops

class Segments:
    """Assignment of ``E`` entries to ``num_segments`` groups.

    ``ids[e]`` is the segment of entry ``e``. For CSR adjacency the ids are the
    row of each stored entry, which is already sorted.
    """

    def __init__(self, ids, num_segments: int):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.num_segments = int(num_segments)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.num_segments):
            raise ValueError("Segments: id out of range")
        self.counts = np.bincount(self.ids, minlength=self.num_segments)
        self.is_sorted = bool(np.all(self.ids[1:] >= self.ids[:-1]))
        e = len(self.ids)
        self.matrix = sp.csr_matrix((np.ones(e), (self.ids, np.arange(e))), shape=(self.num_segments, e))

    @classmethod
    def from_offsets(cls, offsets) -> Segments:
        offsets = np.asarray(offsets, dtype=np.int64)
        n = len(offsets) - 1
        return cls(np.repeat(np.arange(n), np.diff(offsets)), n)

    def __len__(self) -> int:
        return len(self.ids)

    def reduce_sum(self, x: np.ndarray) -> np.ndarray:
        flat = x.reshape(len(self.ids), -1)
        return np.asarray(self.matrix @ flat).reshape((self.num_segments,) + x.shape[1:])

    def reduce_max(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-segment max and the entry index that attains it (first on ties)."""
        order = np.arange(len(self.ids)) if self.is_sorted else np.argsort(self.ids, kind="stable")
        xs = x[order]
        ids = self.ids[order]
        out = np.zeros((self.num_segments,) + x.shape[1:])
        arg = np.full((self.num_segments,) + x.shape[1:], -1, dtype=np.int64)
        nonempty = np.flatnonzero(self.counts)
        if len(nonempty) == 0:
            return out, arg
        starts = np.concatenate([[0], np.cumsum(self.counts)])[nonempty]
        best = np.maximum.reduceat(xs, starts, axis=0)
        out[nonempty] = best
        pos = np.arange(len(ids)).reshape((-1,) + (1,) * (x.ndim - 1))
        pos = np.broadcast_to(pos, xs.shape)
        hit = np.where(xs == best[np.searchsorted(nonempty, ids)], pos, len(ids))
        first = np.minimum.reduceat(hit, starts, axis=0)
        arg[nonempty] = order[first]
        return out, arg


def _check_segments(op: str, x: Tensor, seg: Segments) -> None:
    if x.ndim == 0 or x.shape[0] != len(seg):
        raise ValueError(f"{op}: {x.shape} rows vs {len(seg)} segment entries")


def segment_sum(x: Tensor, seg: Segments) -> Tensor:
    _check_segments("segment_sum", x, seg)
    return _make(seg.reduce_sum(x.data), (x,), "segment_sum", lambda g: (g[seg.ids],))


def segment_mean(x: Tensor, seg: Segments) -> Tensor:
    _check_segments("segment_mean", x, seg)
    inv = 1.0 / np.maximum(seg.counts, 1)
    inv = inv.reshape((-1,) + (1,) * (x.ndim - 1))
    return _make(seg.reduce_sum(x.data) * inv, (x,), "segment_mean", lambda g: ((g * inv)[seg.ids],))


def segment_max(x: Tensor, seg: Segments) -> Tensor:
    _check_segments("segment_max", x, seg)
    out, arg = seg.reduce_max(x.data)

    def rule(g):
        full = np.zeros_like(x.data)
        valid = arg >= 0
        if x.ndim == 1:
            full[arg[valid]] = g[valid]
        else:
            cols = np.broadcast_to(np.arange(x.shape[1]), arg.shape)
            full[arg[valid], cols[valid]] = g[valid]
        return (full,)

    return _make(out, (x,), "segment_max", rule)


def segment_softmax(x: Tensor, seg: Segments) -> Tensor:
    """Softmax of entry scores within each segment."""
    _check_segments("segment_softmax", x, seg)
    peak, _ = seg.reduce_max(x.data)
    e = np.exp(x.data - peak[seg.ids])
    out = e / seg.reduce_sum(e)[seg.ids]

    def rule(g):
        return (out * (g - seg.reduce_sum(g * out)[seg.ids]),)

    return _make(out, (x,), "segment_softmax", rule)


# ---------------------------------------------------------------- regularisation

def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "relu": relu,
    "elu": elu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "maximum": maximum,
    "concat": concat,
    "row_softmax": row_softmax,
    "log_softmax": log_softmax,
    "segment_sum": segment_sum,
    "segment_mean": segment_mean,
    "segment_max": segment_max,
    "segment_softmax": segment_softmax,
    "gather_rows": gather_rows,
    "dropout": dropout,
    "sum": sum,
    "mean": mean,
    "reshape": reshape,
    "index": index_select,
    "lstm_step": lstm_step,
    "softmax_cross_entropy": softmax_cross_entropy,
    "sigmoid_bce": sigmoid_binary_cross_entropy,
}


def record(op_kind: str, *inputs, **attrs) -> Tensor:
    """Apply a named op. Unknown names raise ``KeyError``."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise KeyError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward

class Tape:
    """Ops reachable from ``root`` in topological order (inputs first)."""

    def __init__(self, root: Tensor):
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
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order
        self.root = root

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, wrt: Sequence[Tensor] = ()) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Tensors in ``wrt`` that the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    for t in wrt:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return tape


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> AdamState:
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update in place, then zero the gradients.

    ``weight_decay`` adds an L2 term to the gradient (0 gives plain Adam).
    """
    if len(params) != len(state.m):
        raise ValueError(f"adam_step: {len(params)} params but state holds {len(state.m)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {i} {p.shape} has no gradient")
        if state.m[i].shape != p.shape:
            raise ValueError(f"adam_step: moment shape {state.m[i].shape} vs parameter {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]


def finite_diff_check(fn: Callable[..., Tensor], point: Tensor | Sequence[Tensor],
                      tolerance: float = 1e-6, step: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of ``fn(*points)`` with central differences.

    The error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
    over all entries of all points, i.e. relative to the gradient's scale.
    Points are perturbed in place and restored.
    """
    if tolerance <= 0:
        raise ValueError("finite_diff_check: tolerance must be positive")
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        p.requires_grad = True
        p.grad = None
    out = fn(*points)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check: fn must return a scalar, got {out.shape}")
    backward(out, wrt=points)
    analytic = [p.grad.copy() for p in points]
    numeric = []
    for p in points:
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*points).item()
            flat[i] = orig - step
            lo = fn(*points).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        numeric.append(num)
    diff = max((np.max(np.abs(a - n)) if a.size else 0.0) for a, n in zip(analytic, numeric))
    scale = max(max((np.max(np.abs(a)) if a.size else 0.0), (np.max(np.abs(n)) if n.size else 0.0))
                for a, n in zip(analytic, numeric))
    err = 0.0 if diff == 0.0 else diff / max(scale, np.finfo(float).tiny)
    for p in points:
        p.grad = None
    return GradCheckReport(float(err), bool(err < tolerance), analytic, numeric)
