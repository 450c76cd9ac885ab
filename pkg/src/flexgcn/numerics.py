"""Dense 64-bit matrices with record/replay reverse-mode differentiation.

Everything downstream (graph propagation, layers, the full lifting model)
is built from the primitives in this module. A ``Tape`` records each
primitive applied while it is active; replaying the recorded adjoints in
reverse order yields gradients for every watched leaf. Matrices are
immutable values and graphs are small, so all storage is dense float64.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Input values are outside the operation's domain (empty, non-finite, ...)."""


class TapeError(RuntimeError):
    """The tape was used outside its contract (non-scalar root, replayed twice, ...)."""


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


# --------------------------------------------------------------------------
# Operation counting
# --------------------------------------------------------------------------

@dataclass
class OpCounts:
    """Tally of arithmetic work performed by the primitives.

    ``matmul_madds`` counts dense multiply-adds (rows * inner * cols per
    product). ``structural_madds`` counts only multiply-adds whose left
    operand entry is non-zero, i.e. the work a sparsity-aware kernel would
    do; it is what makes edge-count scaling claims testable on dense
    storage. ``axpy_ops`` counts entries touched by fused a*X + b*Y updates
    and ``elementwise_ops`` everything else.
    """

    matmul_madds: int = 0
    structural_madds: int = 0
    axpy_ops: int = 0
    elementwise_ops: int = 0


_COUNTERS: list[OpCounts] = []


@contextmanager
def count_ops() -> Iterator[OpCounts]:
    """Collect operation counts for every primitive run inside the block."""
    counts = OpCounts()
    _COUNTERS.append(counts)
    try:
        yield counts
    finally:
        _COUNTERS.remove(counts)


def _tally_matmul(a: np.ndarray, out_cols: int) -> None:
    if not _COUNTERS:
        return
    dense = a.shape[0] * a.shape[1] * out_cols
    structural = int(np.count_nonzero(a)) * out_cols
    for c in _COUNTERS:
        c.matmul_madds += dense
        c.structural_madds += structural


def _tally(kind: str, n: int) -> None:
    if not _COUNTERS:
        return
    for c in _COUNTERS:
        setattr(c, kind, getattr(c, kind) + n)


# --------------------------------------------------------------------------
# Matrix
# --------------------------------------------------------------------------

class Matrix:
    """Immutable dense 2-D array of float64 values.

    Construction validates that every entry is finite, which together with
    guarded primitives keeps NaN/Inf from propagating silently.
    """

    __slots__ = ("_a",)

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64, order="C")
        if arr.ndim != 2:
            raise ShapeError(f"Matrix requires a 2-D array, got ndim={arr.ndim}")
        if arr.size and not np.isfinite(arr).all():
            raise DomainError("Matrix entries must be finite (no NaN/Inf)")
        arr.setflags(write=False)
        self._a = arr

    # -- constructors ------------------------------------------------------
    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Matrix":
        # Internal fast path: trusted float64 result of a primitive.
        m = object.__new__(cls)
        if arr.size and not np.isfinite(arr).all():
            raise DomainError("operation produced non-finite entries")
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        m._a = arr
        return m

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls._wrap(np.zeros((rows, cols)))

    @classmethod
    def ones(cls, rows: int, cols: int) -> "Matrix":
        return cls._wrap(np.ones((rows, cols)))

    @classmethod
    def full(cls, rows: int, cols: int, value: float) -> "Matrix":
        return cls._wrap(np.full((rows, cols), float(value)))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls._wrap(np.eye(n))

    # -- views -------------------------------------------------------------
    @property
    def rows(self) -> int:
        return self._a.shape[0]

    @property
    def cols(self) -> int:
        return self._a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._a.shape  # type: ignore[return-value]

    @property
    def data(self) -> np.ndarray:
        """Row-major flat read-only view of the entries."""
        return self._a.reshape(-1)

    def to_numpy(self) -> np.ndarray:
        """Read-only ndarray view (copy before mutating)."""
        return self._a

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self._a[0, 0])

    def equals(self, other: "Matrix", tol: float = 0.0) -> bool:
        if self.shape != other.shape:
            return False
        if tol == 0.0:
            return bool(np.array_equal(self._a, other._a))
        return bool(np.max(np.abs(self._a - other._a), initial=0.0) <= tol)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Matrix({self.rows}x{self.cols})"

    # -- operator sugar (delegates to taped primitives) ---------------------
    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __add__(self, other: "Matrix") -> "Matrix":
        return add(self, other)

    def __sub__(self, other: "Matrix") -> "Matrix":
        return sub(self, other)

    def __mul__(self, other) -> "Matrix":
        if isinstance(other, Matrix):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Matrix":
        return scale(self, float(other))

    def __neg__(self) -> "Matrix":
        return scale(self, -1.0)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

Pullback = Callable[[np.ndarray], np.ndarray]


@dataclass
class _Record:
    out: Matrix
    pullbacks: tuple[tuple[Matrix, Pullback], ...]


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations and their adjoint rules.

    One tape per thread of execution; activate with ``with Tape() as t:``.
    ``backward`` may be called once per recording; call ``clear`` and
    re-record to differentiate again.
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._watched: dict[int, Matrix] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    @property
    def n_records(self) -> int:
        return len(self._records)

    def watch(self, m: Matrix) -> Matrix:
        """Mark ``m`` as a leaf whose gradient backward() must report."""
        self._watched[id(m)] = m
        return m

    def clear(self) -> None:
        """Drop all records and watched leaves; the tape becomes reusable."""
        self._records.clear()
        self._watched.clear()
        self._consumed = False

    def _append(self, record: _Record) -> None:
        if self._consumed:
            raise TapeError("tape already replayed; clear() and re-record before reuse")
        self._records.append(record)

    def backward(self, loss: Matrix) -> dict[Matrix, Matrix]:
        """Gradients of the scalar ``loss`` for every watched leaf.

        Leaves that did not influence the loss get zero gradients.
        """
        if self._consumed:
            raise TapeError("tape already replayed; clear() and re-record before reuse")
        if loss.shape != (1, 1):
            raise TapeError(f"backward root must be a 1x1 scalar node, got {loss.shape}")
        self._consumed = True

        adjoints: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for record in reversed(self._records):
            g = adjoints.pop(id(record.out), None)
            if g is None:
                continue
            for source, pullback in record.pullbacks:
                contribution = pullback(g)
                key = id(source)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + contribution
                else:
                    adjoints[key] = contribution
        out: dict[Matrix, Matrix] = {}
        for key, leaf in self._watched.items():
            g = adjoints.get(key)
            if g is None:
                out[leaf] = Matrix.zeros(leaf.rows, leaf.cols)
            else:
                out[leaf] = Matrix._wrap(np.array(g))
        return out


def backward(tape: Tape, loss: Matrix) -> dict[Matrix, Matrix]:
    """Replay ``tape`` adjoints from the scalar ``loss``; see Tape.backward."""
    return tape.backward(loss)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_operation(out: Matrix, *pullbacks: tuple[Matrix, Pullback]) -> Matrix:
    """Attach adjoint rules for a custom primitive to the active tape.

    Each pullback maps the adjoint of ``out`` to the adjoint contribution of
    one source matrix. No-op when no tape is active.
    """
    tape = _active_tape()
    if tape is not None:
        tape._append(_Record(out, pullbacks))
    return out


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------

def _require_same_shape(op: str, a: Matrix, b: Matrix) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with the usual adjoints dA = G Bᵀ, dB = Aᵀ G."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    aa, bb = a.to_numpy(), b.to_numpy()
    _tally_matmul(aa, b.cols)
    out = Matrix._wrap(aa @ bb)
    return record_operation(
        out,
        (a, lambda g: g @ bb.T),
        (b, lambda g: aa.T @ g),
    )


def add(a: Matrix, b: Matrix) -> Matrix:
    _require_same_shape("add", a, b)
    _tally("elementwise_ops", a.rows * a.cols)
    out = Matrix._wrap(a.to_numpy() + b.to_numpy())
    return record_operation(out, (a, lambda g: g), (b, lambda g: g))


def sub(a: Matrix, b: Matrix) -> Matrix:
    _require_same_shape("sub", a, b)
    _tally("elementwise_ops", a.rows * a.cols)
    out = Matrix._wrap(a.to_numpy() - b.to_numpy())
    return record_operation(out, (a, lambda g: g), (b, lambda g: -g))


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Hadamard (entrywise) product."""
    _require_same_shape("mul", a, b)
    _tally("elementwise_ops", a.rows * a.cols)
    aa, bb = a.to_numpy(), b.to_numpy()
    out = Matrix._wrap(aa * bb)
    return record_operation(out, (a, lambda g: g * bb), (b, lambda g: g * aa))


def scale(a: Matrix, c: float) -> Matrix:
    c = float(c)
    _tally("elementwise_ops", a.rows * a.cols)
    out = Matrix._wrap(a.to_numpy() * c)
    return record_operation(out, (a, lambda g: g * c))


def lincomb(ca: float, a: Matrix, cb: float, b: Matrix) -> Matrix:
    """Fused ca*A + cb*B (a single axpy-style pass over the entries)."""
    _require_same_shape("lincomb", a, b)
    ca, cb = float(ca), float(cb)
    _tally("axpy_ops", a.rows * a.cols)
    out = Matrix._wrap(ca * a.to_numpy() + cb * b.to_numpy())
    return record_operation(out, (a, lambda g: g * ca), (b, lambda g: g * cb))


def gelu(a: Matrix) -> Matrix:
    """GELU via the tanh approximation 0.5x(1 + tanh(√(2/π)(x + 0.044715x³)))."""
    _tally("elementwise_ops", a.rows * a.cols)
    x = a.to_numpy()
    inner = _GELU_C * (x + _GELU_K * x**3)
    t = np.tanh(inner)
    out = Matrix._wrap(0.5 * x * (1.0 + t))

    def pullback(g: np.ndarray) -> np.ndarray:
        sech2 = 1.0 - t * t
        dgelu = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return g * dgelu

    return record_operation(out, (a, pullback))


def absolute(a: Matrix) -> Matrix:
    """Entrywise |x|; the subgradient at 0 is taken as 0."""
    _tally("elementwise_ops", a.rows * a.cols)
    x = a.to_numpy()
    out = Matrix._wrap(np.abs(x))
    return record_operation(out, (a, lambda g: g * np.sign(x)))


def square(a: Matrix) -> Matrix:
    _tally("elementwise_ops", a.rows * a.cols)
    x = a.to_numpy()
    out = Matrix._wrap(x * x)
    return record_operation(out, (a, lambda g: g * (2.0 * x)))


def sqrt(a: Matrix) -> Matrix:
    x = a.to_numpy()
    if np.any(x < 0):
        raise DomainError("sqrt: negative entries")
    _tally("elementwise_ops", a.rows * a.cols)
    r = np.sqrt(x)
    out = Matrix._wrap(r)
    return record_operation(out, (a, lambda g: g * (0.5 / r)))


def div(a: Matrix, b: Matrix) -> Matrix:
    """Entrywise a / b; any zero divisor is rejected."""
    _require_same_shape("div", a, b)
    bb = b.to_numpy()
    if np.any(bb == 0.0):
        raise DomainError("div: zero divisor entry")
    _tally("elementwise_ops", a.rows * a.cols)
    aa = a.to_numpy()
    out = Matrix._wrap(aa / bb)
    return record_operation(
        out,
        (a, lambda g: g / bb),
        (b, lambda g: -g * aa / (bb * bb)),
    )


def transpose(a: Matrix) -> Matrix:
    out = Matrix._wrap(a.to_numpy().T)
    return record_operation(out, (a, lambda g: g.T))


def symmetrize(a: Matrix) -> Matrix:
    """(A + Aᵀ)/2 for square A; gradients flow to both mirrored positions."""
    if a.rows != a.cols:
        raise ShapeError(f"symmetrize: matrix must be square, got {a.shape}")
    _tally("elementwise_ops", a.rows * a.cols)
    x = a.to_numpy()
    out = Matrix._wrap((x + x.T) * 0.5)
    return record_operation(out, (a, lambda g: (g + g.T) * 0.5))


def _require_nonempty(op: str, a: Matrix) -> None:
    if a.rows == 0 or a.cols == 0:
        raise DomainError(f"{op}: empty matrix {a.shape}")


def sum_all(a: Matrix) -> Matrix:
    """Sum of all entries as a 1x1 scalar node."""
    _require_nonempty("sum", a)
    _tally("elementwise_ops", a.rows * a.cols)
    shape = a.shape
    out = Matrix._wrap(np.array([[a.to_numpy().sum()]]))
    return record_operation(out, (a, lambda g: np.full(shape, g[0, 0])))


def mean_all(a: Matrix) -> Matrix:
    """Mean of all entries as a 1x1 scalar node."""
    _require_nonempty("mean", a)
    _tally("elementwise_ops", a.rows * a.cols)
    shape = a.shape
    inv = 1.0 / (shape[0] * shape[1])
    out = Matrix._wrap(np.array([[a.to_numpy().mean()]]))
    return record_operation(out, (a, lambda g: np.full(shape, g[0, 0] * inv)))


def column_l2_norms(a: Matrix) -> Matrix:
    """Euclidean norm of each column, returned as a 1 x cols row."""
    _require_nonempty("column_l2_norms", a)
    _tally("elementwise_ops", a.rows * a.cols)
    x = a.to_numpy()
    norms = np.sqrt((x * x).sum(axis=0, keepdims=True))

    def pullback(g: np.ndarray) -> np.ndarray:
        # Columns with zero norm contribute a zero subgradient.
        safe = np.where(norms > 0.0, norms, 1.0)
        return x * (g / safe)

    out = Matrix._wrap(norms)
    return record_operation(out, (a, pullback))


def row_mean(a: Matrix) -> Matrix:
    """Mean over each row, returned as a rows x 1 column."""
    _require_nonempty("row_mean", a)
    _tally("elementwise_ops", a.rows * a.cols)
    x = a.to_numpy()
    inv = 1.0 / a.cols
    cols = a.cols
    out = Matrix._wrap(x.mean(axis=1, keepdims=True))
    return record_operation(out, (a, lambda g: np.repeat(g * inv, cols, axis=1)))


# --------------------------------------------------------------------------
# Grouped dispatchers
# --------------------------------------------------------------------------

_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "gelu": gelu,
    "abs": absolute,
    "square": square,
    "sqrt": sqrt,
    "div": div,
}

_REDUCE = {
    "sum": sum_all,
    "mean": mean_all,
    "column_l2_norms": column_l2_norms,
    "row_mean": row_mean,
}


def elementwise(op: str, *args) -> Matrix:
    """Dispatch to an entrywise primitive by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def reduce(op: str, m: Matrix) -> Matrix:
    """Dispatch to a reduction primitive by name."""
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise DomainError(f"unknown reduce op {op!r}") from None
    return fn(m)
