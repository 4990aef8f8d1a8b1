"""A small tape-based reverse-mode autodiff engine over dense float64 arrays.

Every primitive computes its forward value eagerly and, when the tape is
recording and some input requires a gradient, appends a :class:`Record`
holding the closure that maps the output adjoint to input adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


@dataclass
class Record:
    kind: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] = field(repr=False)


class Tape:
    def __init__(self, record: bool = True):
        self.records: list[Record] = []
        self.recording = record
        self._next = 0
        self.params: dict[str, "Tensor"] = {}

    def _new_id(self) -> int:
        self._next += 1
        return self._next - 1

    def param(self, name: str, value) -> "Tensor":
        t = Tensor(value, self, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def constant(self, value) -> "Tensor":
        return Tensor(value, self, requires_grad=False)

    def params_from(self, arrays: dict[str, np.ndarray]) -> dict[str, "Tensor"]:
        return {k: self.param(k, v) for k, v in arrays.items()}


class Tensor:
    __array_priority__ = 100

    def __init__(self, value, tape: Tape, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name
        self.id = tape._new_id()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, id={self.id}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


def _emit(kind: str, value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = inputs[0].tape
    needs = tape.recording and any(t.requires_grad for t in inputs)
    out = Tensor(value, tape, requires_grad=needs)
    if needs:
        tape.records.append(Record(kind, tuple(t.id for t in inputs), out.id, vjp))
    return out


def _shape_error(prim: str, *shapes) -> ShapeError:
    return ShapeError(f"{prim}: incompatible shapes {', '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def _broadcast_reduce(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.sum(g)
    if len(shape) == 1:
        return g.sum(axis=0)
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(prim: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sb == () or (len(sa) == 2 and (sb == (sa[1],) or sb == (1, sa[1]))):
        return
    raise _shape_error(prim, sa, sb)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector broadcast over the rows of ``a``."""
    tape = a.tape if isinstance(a, Tensor) else b.tape
    a, b = _lift(a, tape), _lift(b, tape)
    if a.value.ndim < b.value.ndim:
        a, b = b, a
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, _broadcast_reduce(g, sb)))


def sub(a, b) -> Tensor:
    tape = a.tape if isinstance(a, Tensor) else b.tape
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape != b.shape:
        if a.value.ndim >= b.value.ndim:
            _check_broadcast("sub", a, b)
        else:
            _check_broadcast("sub", b, a)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_broadcast_reduce(g, sa), -_broadcast_reduce(g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product (same shapes, or a scalar constant)."""
    tape = a.tape if isinstance(a, Tensor) else b.tape
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape != b.shape and b.shape != () and a.shape != ():
        raise _shape_error("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    sa, sb = a.shape, b.shape
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_broadcast_reduce(g * bv, sa), _broadcast_reduce(g * av, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    # split form avoids overflow in exp for large |x|
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return _emit("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _emit("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def cos(a: Tensor) -> Tensor:
    x = a.value
    return _emit("cos", np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def sin(a: Tensor) -> Tensor:
    x = a.value
    return _emit("sin", np.sin(x), (a,), lambda g: (g * np.cos(x),))


def scatter_matrix(edges: np.ndarray, n_out: int, n_in: int, weights: np.ndarray | None = None) -> sp.csr_matrix:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=float)
    return sp.csr_matrix((w, (edges[:, 1], edges[:, 0])), shape=(n_out, n_in))


def scatter_sum(x: Tensor, edges, n_out: int | None = None, weights=None) -> Tensor:
    """Row ``dst`` of the output sums rows ``src`` of ``x`` over edges ``(src, dst)``.

    ``edges`` may also be a prebuilt sparse operator from :func:`scatter_matrix`.
    """
    if x.value.ndim != 2:
        raise _shape_error("scatter_sum", x.shape)
    if sp.issparse(edges):
        A = edges
    else:
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        n_out = x.shape[0] if n_out is None else n_out
        if e.size and (e[:, 0].max() >= x.shape[0] or e[:, 1].max() >= n_out or e.min() < 0):
            raise ShapeError(f"scatter_sum: edge index out of range for {x.shape[0]} -> {n_out} rows")
        A = scatter_matrix(e, n_out, x.shape[0], weights)
    if A.shape[1] != x.shape[0]:
        raise _shape_error("scatter_sum", A.shape, x.shape)
    AT = A.T.tocsr()
    return _emit("scatter_sum", np.asarray(A @ x.value), (x,), lambda g: (np.asarray(AT @ g),))


def gather(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    return scatter_sum(x, np.column_stack([idx, np.arange(len(idx))]), n_out=len(idx))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    vals = [t.value for t in tensors]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise _shape_error("concat", *[t.shape for t in tensors])
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_(x: Tensor, rows=slice(None), cols=slice(None)) -> Tensor:
    if x.value.ndim != 2:
        raise _shape_error("slice", x.shape)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, cols] += g
        return (out,)

    return _emit("slice", x.value[rows, cols], (x,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", old, shape)
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def mse_reduce(a: Tensor, b, weights=None) -> Tensor:
    """Mean squared difference; with per-row ``weights`` the weighted sum of row sums instead."""
    b = _lift(b, a.tape)
    if a.shape != b.shape:
        raise _shape_error("mse_reduce", a.shape, b.shape)
    diff = a.value - b.value
    if weights is None:
        coef = np.full(diff.shape, 1.0 / diff.size)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (diff.shape[0],):
            raise _shape_error("mse_reduce", a.shape, w.shape)
        coef = np.broadcast_to(w.reshape((-1,) + (1,) * (diff.ndim - 1)), diff.shape)
    value = np.sum(coef * diff * diff)
    return _emit("mse_reduce", np.asarray(value), (a, b),
                 lambda g: (2.0 * g * coef * diff, -2.0 * g * coef * diff))


def dropout_mask(rate: float, rng: np.random.Generator, shape, tape: Tape) -> Tensor:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return tape.constant(np.ones(shape))
    keep = 1.0 - rate
    return tape.constant((rng.random(shape) < keep) / keep)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    return mul(x, dropout_mask(rate, rng, x.shape, x.tape))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


GradientMap = dict[str, np.ndarray]


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Adjoints of a scalar ``loss`` with respect to every named parameter on ``tape``."""
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for rec in reversed(tape.records):
        g = adj.pop(rec.output, None)
        if g is None:
            continue
        for tid, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None:
                continue
            if tid in adj:
                adj[tid] = adj[tid] + gi
            else:
                adj[tid] = gi
    return {
        name: np.array(adj.get(t.id, np.zeros_like(t.value)), dtype=np.float64).reshape(t.shape)
        for name, t in tape.params.items()
    }


def gradcheck(
    fn: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between the tape gradient and central differences.

    ``fn`` builds the loss on the tape it is given from the parameter tensors.
    The relative error of each entry uses max(1, |analytic|, |numeric|) as
    denominator. ``max_entries`` spot-checks a random subset per parameter.
    """
    tape = Tape()
    loss = fn(tape, tape.params_from(params))
    grads = backward(tape, loss)

    def evaluate(arrays):
        t = Tape(record=False)
        return float(fn(t, t.params_from(arrays)).value)

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for name, value in params.items():
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = rng.choice(value.size, max_entries, replace=False)
        for k in flat_idx:
            idx = np.unravel_index(k, value.shape)
            plus = {n: v.copy() for n, v in params.items()}
            minus = {n: v.copy() for n, v in params.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * step)
            analytic = grads[name][idx]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst
