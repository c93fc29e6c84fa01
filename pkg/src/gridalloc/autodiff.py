"""Dense reverse-mode differentiation on a define-by-run tape.

Every primitive computes its value with numpy in float64 and appends one
record ``(output, inputs, vjp)`` to the tape of its operands.  ``Tape.backward``
walks the records in exact reverse order and accumulates adjoints additively.

Broadcasting is deliberately limited: binary elementwise ops accept equal
shapes, or a right operand that is a ``[1 x n]`` row or ``[m x 1]`` column.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A node on a tape.  ``data`` is a float64 ndarray (0-d for scalars)."""

    __slots__ = ("data", "tape", "requires_grad", "name", "__weakref__")

    def __init__(self, data: np.ndarray, tape: "Tape", requires_grad: bool, name: str | None = None):
        self.data = data
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; each maps onto a primitive below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Vjp]] = []
        self.variables: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.records)

    def variable(self, value, name: str | None = None) -> Tensor:
        data = np.array(value, dtype=np.float64, copy=True)
        _check_finite(data, f"variable {name or ''}".strip())
        t = Tensor(data, self, True, name)
        self.variables.append(t)
        return t

    def constant(self, value, name: str | None = None) -> Tensor:
        data = np.asarray(value, dtype=np.float64)
        return Tensor(data, self, False, name)

    def record(self, op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
        _check_finite(data, op)
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(data, self, needs, op)
        if needs:
            self.records.append((out, inputs, vjp))
        return out

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Adjoints of scalar ``loss`` w.r.t. every variable on this tape.

        Variables the loss does not depend on get zero arrays.
        """
        if loss.tape is not self:
            raise ValueError("loss tensor belongs to a different tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.records):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            for t, gt in zip(inputs, vjp(g)):
                if gt is None or not t.requires_grad:
                    continue
                key = id(t)
                adj[key] = adj[key] + gt if key in adj else gt
        return {v: adj.get(id(v), np.zeros_like(v.data)) for v in self.variables}


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {what}")


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 2 and shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    if len(shape) == 2 and shape[1] == 1:
        return g.sum(axis=1, keepdims=True)
    return g.sum().reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if b.ndim == 0:
        return
    if a.ndim == 2 and b.ndim == 2:
        if b.shape == (1, a.shape[1]) or b.shape == (a.shape[0], 1):
            return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return tape.record("matmul", A @ B, (a, b), vjp)


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return tape.record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return tape.record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("mul", a.data, b.data)
    A, B = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * B, A.shape) if a.requires_grad else None,
            _unbroadcast(g * A, B.shape) if b.requires_grad else None,
        )

    return tape.record("mul", A * B, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape.record("scale", a.data * c, (a,), lambda g: (g * c,))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices vertically."""
    tape = _tape_of(*parts)
    parts = [_lift(p, tape) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return tape.record("concat_rows", np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices horizontally."""
    tape = _tape_of(*parts)
    parts = [_lift(p, tape) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return tape.record("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return a.tape.record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return a.tape.record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return a.tape.record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def row_l2_distance(a, b) -> Tensor:
    """Per-row Euclidean distance ``||a_i - b_i||`` as an ``[n x 1]`` column.

    At zero distance the adjoint is taken as zero (the subgradient at the kink).
    """
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"row_l2_distance: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))[:, None]
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where(dist > 0, diff / safe, 0.0)

    def vjp(g):
        ga = g * unit
        return (ga, -ga)

    return tape.record("row_l2_distance", dist, (a, b), vjp)


def gather_rows(a: Tensor, index) -> Tensor:
    """``a[index]`` for an integer index vector."""
    idx = np.asarray(index, dtype=np.intp)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape.record("gather_rows", a.data[idx], (a,), vjp)


def segment_sum(a: Tensor, segments, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets; the reverse of ``gather_rows``."""
    seg = np.asarray(segments, dtype=np.intp)
    if seg.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum: {seg.shape[0]} segment ids for {a.shape[0]} rows")
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, seg, a.data)
    return a.tape.record("segment_sum", out, (a,), lambda g: (g[seg],))


def _grouped_softmax_values(x: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    gmax = np.full((n_groups,) + x.shape[1:], -np.inf)
    np.maximum.at(gmax, groups, x)
    e = np.exp(x - gmax[groups])
    denom = np.zeros((n_groups,) + x.shape[1:])
    np.add.at(denom, groups, e)
    return e / denom[groups]


def grouped_softmax(scores: Tensor, groups, n_groups: int) -> Tensor:
    """Softmax over rows sharing a group id, independently per column.

    ``scores`` is ``[E x H]``; row ``e`` belongs to group ``groups[e]``.
    The per-group maximum is subtracted before exponentiation.
    """
    grp = np.asarray(groups, dtype=np.intp)
    x = scores.data
    if x.ndim != 2 or grp.shape[0] != x.shape[0]:
        raise ShapeError(f"grouped_softmax: scores {x.shape} vs groups {grp.shape}")
    y = _grouped_softmax_values(x, grp, n_groups)

    def vjp(g):
        gy = g * y
        tot = np.zeros((n_groups,) + x.shape[1:])
        np.add.at(tot, grp, gy)
        return (gy - y * tot[grp],)

    return scores.tape.record("grouped_softmax", y, (scores,), vjp)


def grouped_neg_softmax(costs: Tensor, groups, n_groups: int, tau: float) -> Tensor:
    """``exp(-c/tau)`` normalised within each group."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    grp = np.asarray(groups, dtype=np.intp)
    x = -costs.data / tau
    if x.ndim != 2 or grp.shape[0] != x.shape[0]:
        raise ShapeError(f"grouped_neg_softmax: costs {x.shape} vs groups {grp.shape}")
    y = _grouped_softmax_values(x, grp, n_groups)

    def vjp(g):
        gy = g * y
        tot = np.zeros((n_groups,) + x.shape[1:])
        np.add.at(tot, grp, gy)
        return (-(gy - y * tot[grp]) / tau,)

    return costs.tape.record("grouped_neg_softmax", y, (costs,), vjp)


def kl_div(p, q: Tensor) -> Tensor:
    """``sum P ln(P/Q)`` with ``0 ln(0/q) = 0``.  ``p`` is a constant."""
    P = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    Q = q.data
    if P.shape != Q.shape:
        raise ShapeError(f"kl_div: incompatible shapes {P.shape} and {Q.shape}")
    support = P > 0
    if np.any(Q[support] <= 0):
        raise NonFiniteError("kl_div: reconstructed distribution has zero mass where the target does not")
    safe_q = np.where(support, Q, 1.0)
    terms = np.where(support, P * (np.log(np.where(support, P, 1.0)) - np.log(safe_q)), 0.0)
    value = np.array(terms.sum())

    def vjp(g):
        return (-g * np.where(support, P / safe_q, 0.0),)

    return q.tape.record("kl_div", value, (q,), vjp)


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = a.shape
    return a.tape.record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))
