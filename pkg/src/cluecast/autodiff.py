"""Dense reverse-mode automatic differentiation on numpy arrays.

Everything trainable in the package runs through this module. Values are
2-D arrays (row vectors for single states, scalars as (1,1)); a `Tape`
records primitive operations while active and replays them backwards in
reverse creation order, which is a valid reverse topological order for
define-by-run graphs. Tensors are treated as immutable once created; the
only sanctioned mutation is the in-place parameter perturbation performed
by `grad_check`.

Float64 is the reference precision (the gradient checker is unreliable in
float32); float32 is accepted for faster training runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ACTIVE: "Tape | None" = None


class Tensor:
    """A 2-D array value, optionally participating in gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_track")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if data.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {data.shape}")
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # True when gradients must flow through this tensor (leaf parameter
        # or any value computed from one while a tape was active).
        self._track = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(data), requires_grad=True)


def constant(data) -> Tensor:
    arr = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return Tensor(np.ascontiguousarray(arr))


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


class Tape:
    """Ordered record of primitive ops; single-owner, non-reentrant."""

    __slots__ = ("_records", "_leaves")

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into each leaf's .grad.

        Visits records exactly once in reverse order; outputs that do not
        feed into `loss` receive no gradient (implicitly zero).
        """
        if loss.shape != (1, 1):
            raise ValueError(f"backward expects a scalar (1,1) loss, got {loss.shape}")
        acc: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=loss.dtype)}
        for out, bwd in reversed(self._records):
            g = acc.pop(id(out), None)
            if g is None:
                continue
            bwd(g, acc)
        for key, leaf in self._leaves.items():
            g = acc.get(key)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad += g


def _buf(acc: dict, t: Tensor) -> np.ndarray:
    b = acc.get(id(t))
    if b is None:
        b = acc[id(t)] = np.zeros_like(t.data)
    return b


def _emit(out: Tensor, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    """Register a record if a tape is active and any input needs gradients."""
    tape = _ACTIVE
    if tape is not None and any(x._track for x in inputs):
        out._track = True
        tape._records.append((out, bwd))
        for x in inputs:
            if x.requires_grad:
                tape._leaves[id(x)] = x
    return out


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g, acc):
        if a._track:
            _buf(acc, a)[...] += g @ b.data.T
        if b._track:
            _buf(acc, b)[...] += a.data.T @ g

    return _emit(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g, acc):
        if a._track:
            _buf(acc, a)[...] += g
        if b._track:
            _buf(acc, b)[...] += g

    return _emit(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)

    def bwd(g, acc):
        if a._track:
            _buf(acc, a)[...] += g
        if b._track:
            _buf(acc, b)[...] -= g

    return _emit(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd(g, acc):
        if a._track:
            _buf(acc, a)[...] += g * b.data
        if b._track:
            _buf(acc, b)[...] += g * a.data

    return _emit(out, (a, b), bwd)


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)

    def bwd(g, acc):
        _buf(acc, x)[...] -= g

    return _emit(out, (x,), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python float constant (no gradient w.r.t. c)."""
    out = Tensor(x.data * c)

    def bwd(g, acc):
        _buf(acc, x)[...] += g * c

    return _emit(out, (x,), bwd)


def smul(s: Tensor, x: Tensor) -> Tensor:
    """Scalar (1,1) tensor times matrix, differentiable in both."""
    if s.shape != (1, 1):
        raise ValueError("smul scalar must have shape (1,1)")
    out = Tensor(s.data[0, 0] * x.data)

    def bwd(g, acc):
        if s._track:
            _buf(acc, s)[...] += (g * x.data).sum()
        if x._track:
            _buf(acc, x)[...] += g * s.data[0, 0]

    return _emit(out, (s, x), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(g, acc):
        _buf(acc, x)[...] += g * (x.data > 0)

    return _emit(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # exp(-logaddexp(0, -x)) is overflow-safe on both tails
    s = np.exp(-np.logaddexp(0.0, -x.data))
    out = Tensor(s)

    def bwd(g, acc):
        _buf(acc, x)[...] += g * s * (1.0 - s)

    return _emit(out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    u = np.tanh(x.data)
    out = Tensor(u)

    def bwd(g, acc):
        _buf(acc, x)[...] += g * (1.0 - u * u)

    return _emit(out, (x,), bwd)


def softmax_row(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax_row input must be finite")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def bwd(g, acc):
        _buf(acc, x)[...] += p * (g - (g * p).sum(axis=1, keepdims=True))

    return _emit(out, (x,), bwd)


def log_softmax_row(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise ValueError("log_softmax_row input must be finite")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(logp)

    def bwd(g, acc):
        _buf(acc, x)[...] += g - np.exp(logp) * g.sum(axis=1, keepdims=True)

    return _emit(out, (x,), bwd)


def concat(xs: list[Tensor], axis: int = 1) -> Tensor:
    if axis not in (0, 1):
        raise ValueError("concat supports axis 0 or 1")
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    sizes = [x.shape[axis] for x in xs]
    offs = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g, acc):
        for x, a, b in zip(xs, offs[:-1], offs[1:]):
            if x._track:
                piece = g[:, a:b] if axis == 1 else g[a:b, :]
                _buf(acc, x)[...] += piece

    return _emit(out, tuple(xs), bwd)


def mean_rows(x: Tensor) -> Tensor:
    n = x.shape[0]
    if n == 0:
        raise ValueError("mean_rows on zero rows")
    out = Tensor(x.data.mean(axis=0, keepdims=True))

    def bwd(g, acc):
        _buf(acc, x)[...] += g / n  # broadcasts over rows

    return _emit(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.array([[x.data.sum()]], dtype=x.dtype))

    def bwd(g, acc):
        _buf(acc, x)[...] += g[0, 0]

    return _emit(out, (x,), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather; backward scatter-adds (duplicate ids accumulate)."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        idx = idx.reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[idx])

    def bwd(g, acc):
        np.add.at(_buf(acc, table), idx, g)

    return _emit(out, (table,), bwd)


# gather over activations is the same primitive as an embedding lookup
gather_rows = embedding_lookup


def index_sum_rows(m: Tensor, idx, n_rows: int) -> Tensor:
    """out[j] = sum of m rows i with idx[i] == j (scatter-add)."""
    ii = np.asarray(idx, dtype=np.int64)
    if ii.shape != (m.shape[0],):
        raise ValueError("index length must match row count")
    data = np.zeros((n_rows, m.shape[1]), dtype=m.dtype)
    np.add.at(data, ii, m.data)
    out = Tensor(data)

    def bwd(g, acc):
        _buf(acc, m)[...] += g[ii]

    return _emit(out, (m,), bwd)


def scale_rows(x: Tensor, coeffs) -> Tensor:
    """Multiply row i by constant coeffs[i]."""
    c = np.asarray(coeffs, dtype=x.dtype).reshape(-1, 1)
    if c.shape[0] != x.shape[0]:
        raise ValueError("coeff length must match row count")
    out = Tensor(x.data * c)

    def bwd(g, acc):
        _buf(acc, x)[...] += g * c

    return _emit(out, (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if axis not in (0, 1):
        raise ValueError("narrow supports axis 0 or 1")
    if start < 0 or start + length > x.shape[axis]:
        raise ValueError("narrow out of bounds")
    sl = (slice(start, start + length), slice(None)) if axis == 0 else (slice(None), slice(start, start + length))
    out = Tensor(x.data[sl].copy())

    def bwd(g, acc):
        _buf(acc, x)[sl] += g

    return _emit(out, (x,), bwd)


def transpose2d(x: Tensor) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.T))

    def bwd(g, acc):
        _buf(acc, x)[...] += g.T

    return _emit(out, (x,), bwd)


def pick(x: Tensor, i: int, j: int) -> Tensor:
    """Select one element as a (1,1) scalar."""
    out = Tensor(x.data[i : i + 1, j : j + 1].copy())

    def bwd(g, acc):
        _buf(acc, x)[i, j] += g[0, 0]

    return _emit(out, (x,), bwd)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_param: str
    n_checked: int

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} "
            f"(worst at {self.worst_param}, {self.n_checked} elements)"
        )


def grad_check(f, params: dict[str, Tensor], h: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of scalar f() against central differences.

    Perturbs every element of every parameter by +/- h and re-evaluates f
    without a tape. Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        out = f()
    if out.shape != (1, 1):
        raise ValueError("grad_check target must return a (1,1) scalar")
    if not np.isfinite(out.data[0, 0]):
        raise ValueError("grad_check: f is not finite at the given parameters")
    tape.backward(out)

    max_rel = 0.0
    worst = ""
    n_checked = 0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().data[0, 0]
            flat[i] = orig - h
            f_minus = f().data[0, 0]
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError(f"grad_check: non-finite value while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{i}]"
    for p in params.values():
        p.zero_grad()
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel <= tol, worst_param=worst, n_checked=n_checked)
