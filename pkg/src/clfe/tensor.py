"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a record to the active :class:`Tape`.
``backward`` walks the records once, newest first, and accumulates gradients.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (non-scalar loss, stale tape, ...)."""


DEBUG = False


@dataclass
class _Record:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered list of operation records.

    Records are appended in execution order, which makes the list topologically
    sorted by construction. A tape can be differentiated once; ``reset`` clears it
    for reuse. Recording onto a consumed tape starts a fresh generation.
    """

    records: list[_Record] = field(default_factory=list)
    generation: int = 0
    consumed: bool = False

    def reset(self) -> None:
        self.records.clear()
        self.generation += 1
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, rec: _Record) -> tuple[int, int]:
        if self.consumed:
            self.reset()
        self.records.append(rec)
        return (self.generation, len(self.records) - 1)

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("tape already differentiated; call reset() before another backward")
        if loss.tape_id is None or loss._tape is not self or loss.tape_id[0] != self.generation:
            raise TapeError("loss was not produced on this tape")
        end = loss.tape_id[1]
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records[: end + 1]):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            if rec.output.requires_grad:
                rec.output._accumulate(g)
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # remaining entries are leaves (tensors not produced on the tape)
        leaves = {id(t): t for rec in self.records[: end + 1] for t in rec.inputs}
        for key, g in grads.items():
            leaves[key]._accumulate(g)
        self.consumed = True


_state = threading.local()


def current_tape() -> Tape:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = [Tape()]
    return stack[-1]


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Record operations onto ``tape`` (a fresh one by default)."""
    tape = Tape() if tape is None else tape
    current_tape()
    _state.stack.append(tape)
    try:
        yield tape
    finally:
        _state.stack.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array with an optional gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: tuple[int, int] | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64).reshape(self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced by a recorded operation")
        self._tape.backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = current_tape()
        out._tape = tape
        out.tape_id = tape._append(_Record(op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _make("matmul", A @ B, (a, b), back)


def spmm(adj: sp.csr_matrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times dense tensor; ``adj`` is not differentiated."""
    if adj.shape[1] != x.shape[0]:
        raise DimensionError(f"spmm: cannot multiply {adj.shape} by {x.shape}")
    adj_t = adj.T.tocsr()
    return _make("spmm", np.asarray(adj @ x.data), (x,), lambda g: (np.asarray(adj_t @ g),))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    p = a.shape[1]
    return _make("concat_cols", np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :p], g[:, p:]))


def split_cols(x: Tensor, p: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_cols`: first ``p`` columns and the rest."""
    return take_cols(x, 0, p), take_cols(x, p, x.shape[1])


def take_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make("take_cols", x.data[:, start:stop].copy(), (x,), back)


def concat_many(parts: Sequence[Tensor]) -> Tensor:
    out = parts[0]
    for p in parts[1:]:
        out = concat_cols(out, p)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]``; the backward pass scatters gradients back."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")

    def back(g):
        return (_segment_sum(g, idx, n),)

    return _make("gather_rows", x.data[idx], (x,), back)


def _segment_sum(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    # CSR rows are summed in ascending column (= edge) order, so the result
    # is independent of thread scheduling.
    E = len(seg)
    flat = values.reshape(E, int(np.prod(values.shape[1:], dtype=np.int64)))
    m = sp.csr_matrix((np.ones(E), (seg, np.arange(E))), shape=(n, E))
    out = np.asarray(m @ flat)
    return out.reshape((n,) + values.shape[1:])


def scatter_add(messages: Tensor, dst: np.ndarray, n: int) -> Tensor:
    dst = np.asarray(dst, dtype=np.int64)
    if len(dst) != messages.shape[0]:
        raise DimensionError(f"scatter_add: {len(dst)} indices for {messages.shape[0]} messages")
    if dst.size and (dst.min() < 0 or dst.max() >= n):
        raise IndexError(f"scatter_add: destination index out of range for n={n}")
    return _make("scatter_add", _segment_sum(messages.data, dst, n), (messages,),
                 lambda g: (g[dst],))


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data
    return _make("mul", A * B, (a, b),
                 lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a, b)
    A, B = a.data, b.data
    out = A / B
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha)
    return _make("leaky_relu", x.data * slope, (x,), lambda g: (g * slope,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split on sign so exp never overflows
    with np.errstate(under="ignore"):
        e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make("exp", e, (x,), lambda g: (g * e,))


def square(x: Tensor) -> Tensor:
    X = x.data
    return _make("square", X * X, (x,), lambda g: (2.0 * g * X,))


def identity(x: Tensor) -> Tensor:
    return x


ELEMENTWISE: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("sum_all", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def sum_cols(x: Tensor) -> Tensor:
    """Row sums of a 2-D tensor, kept as an ``n×1`` column."""
    shape = x.shape
    return _make("sum_cols", x.data.sum(axis=1, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_rows(x: Tensor) -> Tensor:
    n = x.shape[0]
    return _make("sum_rows", x.data.sum(axis=0), (x,),
                 lambda g: (np.broadcast_to(g, (n,) + g.shape).copy(),))


def mean_rows(x: Tensor) -> Tensor:
    return scale(sum_rows(x), 1.0 / x.shape[0])


def mean_segments(x: Tensor, segments: np.ndarray, num_segments: int | None = None) -> Tensor:
    """Per-segment row means; empty segments give zero rows.

    The returned tensor carries an ``empty_segments`` attribute listing the
    segment ids that had no rows.
    """
    segments = np.asarray(segments, dtype=np.int64)
    if len(segments) != x.shape[0]:
        raise DimensionError(f"mean_segments: {len(segments)} segment ids for {x.shape[0]} rows")
    k = int(segments.max()) + 1 if num_segments is None else num_segments
    counts = np.bincount(segments, minlength=k).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    summed = scatter_add(x, segments, k)
    out = mul(summed, Tensor(inv.reshape((k,) + (1,) * (x.ndim - 1))))
    out.empty_segments = np.flatnonzero(counts == 0)
    return out


def reduce(op: str, x: Tensor, segments: np.ndarray | None = None) -> Tensor:
    if op == "mean_rows":
        return mean_rows(x)
    if op == "sum_rows":
        return sum_rows(x)
    if op == "mean_segments":
        if segments is None:
            raise ValueError("mean_segments needs a segment vector")
        return mean_segments(x, segments)
    raise ValueError(f"unknown reduction {op!r}")


def segment_softmax(scores: Tensor, segments: np.ndarray, n: int | None = None) -> Tensor:
    """Softmax over the entries of ``scores`` that share a segment id.

    ``scores`` may be 1-D (one score per edge) or 2-D (one column per head).
    """
    seg = np.asarray(segments, dtype=np.int64)
    S = scores.data
    if S.shape[0] != len(seg):
        raise DimensionError(f"segment_softmax: {len(seg)} segment ids for {S.shape[0]} scores")
    n = int(seg.max()) + 1 if n is None and len(seg) else (n or 0)
    if len(seg) == 0:
        return _make("segment_softmax", S.copy(), (scores,), lambda g: (g,))
    seg_max = np.full((n,) + S.shape[1:], -np.inf)
    np.maximum.at(seg_max, seg, S)
    e = np.exp(S - seg_max[seg])
    denom = _segment_sum(e, seg, n)
    p = e / denom[seg]

    def back(g):
        dot = _segment_sum(g * p, seg, n)
        return (p * (g - dot[seg]),)

    return _make("segment_softmax", p, (scores,), back)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, d: int) -> "BatchNormState":
        return cls(np.zeros(d), np.ones(d))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool = True) -> Tensor:
    n, d = x.shape
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"batch_norm: features {d} vs gamma {gamma.shape}, beta {beta.shape}")
    if training:
        if n < 1:
            raise DimensionError("batch_norm: training mode needs at least one row")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu) * inv

        def back_x(g):
            return inv / n * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0))
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv

        def back_x(g):
            return g * inv

    G = gamma.data
    out = xhat * G + beta.data

    def back(g):
        return (back_x(g * G), (g * xhat).sum(axis=0), g.sum(axis=0))

    return _make("batch_norm", out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          class_weights: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy; with ``class_weights`` each row is scaled by its class weight."""
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    if len(labels) != n:
        raise DimensionError(f"cross_entropy: {len(labels)} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"cross_entropy: label out of range for {C} classes")
    Z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    rows = np.arange(n)
    loss = -(w * logp[rows, labels]).sum() / n

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (float(g) * p * w[:, None] / n,)

    return _make("cross_entropy", np.array(loss), (logits,), back)


def l1_loss(pred: Tensor, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    P = pred.data.reshape(-1)
    t = t.reshape(-1)
    if P.shape != t.shape:
        raise DimensionError(f"l1_loss: {pred.shape} vs {t.shape}")
    diff = P - t
    shape = pred.shape
    return _make("l1_loss", np.array(np.abs(diff).mean()), (pred,),
                 lambda g: ((float(g) * np.sign(diff) / len(diff)).reshape(shape),))


def backward(loss: Tensor) -> None:
    loss.backward()


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    passed: bool
    checked: int
    skipped: list[tuple[int, ...]] = field(default_factory=list)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-6, kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f(x)`` with central differences.

    ``x.data`` is perturbed in place and restored. Relative error at a
    coordinate is ``|ad - fd| / max(|ad|, |fd|, floor)``. A coordinate whose
    second difference exceeds ``kink_tol * h`` sits on a non-smooth point
    (a relu kink, say) and is skipped rather than compared.
    """
    saved_grad, saved_flag = x.grad, x.requires_grad
    x.grad, x.requires_grad = None, True
    with recording() as tape:
        out = f(x)
        if out.tape_id is not None:
            tape.backward(out)
    ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad, x.requires_grad = saved_grad, saved_flag

    with no_grad():
        f0 = f(x).item()
        worst, worst_idx, skipped = 0.0, None, []
        for idx in np.ndindex(x.shape):
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = f(x).item()
            x.data[idx] = orig - h
            fm = f(x).item()
            x.data[idx] = orig
            if abs(fp - 2 * f0 + fm) > kink_tol * h:
                skipped.append(idx)
                continue
            fd = (fp - fm) / (2 * h)
            rel = abs(ad[idx] - fd) / max(abs(ad[idx]), abs(fd), floor)
            if worst_idx is None or rel > worst:
                worst, worst_idx = rel, idx
    checked = x.data.size - len(skipped)
    return GradCheckReport(worst, worst_idx, worst <= tol, checked, skipped)
