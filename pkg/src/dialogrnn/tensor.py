"""Dense float64 tensors with tape-based reverse-mode differentiation.

Rank is limited to 0 (via shape ``(1,)``), 1 and 2; sequences are handled
as lists of tensors by the callers. Every operation takes an optional
``Tape``; when one is passed, the op appends a backward rule so that
``Tape.backward`` can later accumulate adjoints in exact reverse order of
the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input value lies outside the operation's domain."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""


class Tensor:
    """A dense array of float64 values, rank <= 2.

    ``array`` is the backing numpy array; ``data`` exposes it as a flat
    row-major view, so ``len(t.data) == prod(t.shape)`` always holds.
    """

    __slots__ = ("array",)

    def __init__(self, values) -> None:
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 2:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (shape {arr.shape})")
        self.array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        return self.array.reshape(-1)

    @property
    def size(self) -> int:
        return self.array.size

    def item(self) -> float:
        if self.array.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.array.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def scalar(value: float) -> Tensor:
    return Tensor(np.array([value], dtype=np.float64))


class Tape:
    """Ordered record of primitive operations for reverse-mode differentiation.

    Each record holds a backward rule (a closure over the operands) that
    reads the output's adjoint and accumulates into the operands' adjoints.
    ``backward`` replays records in exact reverse order of the forward pass,
    so gradients are deterministic for a fixed forward computation.
    """

    __slots__ = ("_records", "_outputs")

    def __init__(self) -> None:
        # each record: (output, operands, backward_fn(adjoints))
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, operands: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._records.append((out, operands, backward_fn))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate adjoints of ``loss`` for every tensor on the tape.

        The returned mapping holds one adjoint per recorded tensor, of
        identical shape to its value; tensors not on any path to the loss
        get all-zero adjoints. The tape is left intact, so calling backward
        twice yields identical gradients.
        """
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise ContractError("loss was not produced on this tape")
        adjoints: dict[Tensor, np.ndarray] = {}
        for out, operands, _ in self._records:
            if out not in adjoints:
                adjoints[out] = np.zeros_like(out.array)
            for op in operands:
                if op not in adjoints:
                    adjoints[op] = np.zeros_like(op.array)
        adjoints[loss] = np.ones_like(loss.array)
        for out, operands, backward_fn in reversed(self._records):
            backward_fn(adjoints)
        return adjoints


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of ``loss`` with respect to every tensor recorded on ``tape``."""
    return tape.backward(loss)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.array.shape != b.array.shape:
        raise ShapeError(f"{op}: shape {a.shape} does not match shape {b.shape}")


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Matrix product; also accepts a rank-1 right operand (matrix-vector)."""
    am, bm = a.array, b.array
    if am.ndim != 2 or bm.ndim not in (1, 2) or am.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul: shape {a.shape} incompatible with shape {b.shape}")
    out = Tensor(am.dot(bm))

    if tape is not None:
        if bm.ndim == 1:
            def back(adj, a=a, b=b, out=out):
                g = adj[out]
                adj[a] += np.outer(g, b.array)
                adj[b] += a.array.T.dot(g)
        else:
            def back(adj, a=a, b=b, out=out):
                g = adj[out]
                adj[a] += g.dot(b.array.T)
                adj[b] += a.array.T.dot(g)
        tape.record(out, (a, b), back)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor(a.array + b.array)
    if tape is not None:
        def back(adj, a=a, b=b, out=out):
            g = adj[out]
            adj[a] += g
            adj[b] += g
        tape.record(out, (a, b), back)
    return out


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = Tensor(a.array - b.array)
    if tape is not None:
        def back(adj, a=a, b=b, out=out):
            g = adj[out]
            adj[a] += g
            adj[b] -= g
        tape.record(out, (a, b), back)
    return out


def hadamard(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _require_same_shape(a, b, "hadamard")
    out = Tensor(a.array * b.array)
    if tape is not None:
        def back(adj, a=a, b=b, out=out):
            g = adj[out]
            adj[a] += g * b.array
            adj[b] += g * a.array
        tape.record(out, (a, b), back)
    return out


def tanh(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.tanh(x.array))
    if tape is not None:
        def back(adj, x=x, out=out):
            adj[x] += adj[out] * (1.0 - out.array * out.array)
        tape.record(out, (x,), back)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Logistic function 1/(1+exp(-x)), evaluated overflow-safely."""
    v = x.array
    out_arr = np.empty_like(v)
    pos = v >= 0
    out_arr[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_arr[~pos] = ev / (1.0 + ev)
    out = Tensor(out_arr)
    if tape is not None:
        def back(adj, x=x, out=out):
            adj[x] += adj[out] * out.array * (1.0 - out.array)
        tape.record(out, (x,), back)
    return out


def one_minus(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise 1 - x (the GRU update-gate complement)."""
    out = Tensor(1.0 - x.array)
    if tape is not None:
        def back(adj, x=x, out=out):
            adj[x] -= adj[out]
        tape.record(out, (x,), back)
    return out


def scale(x: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    """Multiply by a constant (not differentiated through)."""
    out = Tensor(x.array * c)
    if tape is not None:
        def back(adj, x=x, out=out, c=c):
            adj[x] += adj[out] * c
        tape.record(out, (x,), back)
    return out


def softmax(u: Tensor, tape: Tape | None = None) -> Tensor:
    """Softmax over a rank-1 tensor, computed with max-subtraction."""
    v = u.array
    if v.ndim != 1 or v.size == 0:
        raise DomainError(f"softmax requires a non-empty rank-1 tensor, got shape {u.shape}")
    e = np.exp(v - v.max())
    out = Tensor(e / e.sum())
    if tape is not None:
        def back(adj, u=u, out=out):
            g = adj[out]
            a = out.array
            adj[u] += a * (g - g.dot(a))
        tape.record(out, (u,), back)
    return out


def cross_entropy(logits: Tensor, target_index: int, tape: Tape | None = None) -> Tensor:
    """Negative log softmax probability of ``target_index``, in log-sum-exp form."""
    v = logits.array
    if v.ndim != 1:
        raise DomainError(f"cross_entropy requires rank-1 logits, got shape {logits.shape}")
    if not 0 <= target_index < v.size:
        raise DomainError(f"target index {target_index} out of range for {v.size} logits")
    m = v.max()
    shifted = v - m
    lse = m + np.log(np.exp(shifted).sum())
    out = scalar(lse - v[target_index])
    if tape is not None:
        def back(adj, logits=logits, out=out, t=target_index, shifted=shifted):
            g = adj[out][0]
            p = np.exp(shifted)
            p /= p.sum()
            p[t] -= 1.0
            adj[logits] += g * p
        tape.record(out, (logits,), back)
    return out


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = scalar(float(x.array.sum()))
    if tape is not None:
        def back(adj, x=x, out=out):
            adj[x] += adj[out][0]
        tape.record(out, (x,), back)
    return out


def concat(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Concatenate two rank-1 tensors."""
    if a.array.ndim != 1 or b.array.ndim != 1:
        raise ShapeError(f"concat requires rank-1 tensors, got {a.shape} and {b.shape}")
    out = Tensor(np.concatenate((a.array, b.array)))
    if tape is not None:
        n = a.array.size
        def back(adj, a=a, b=b, out=out, n=n):
            g = adj[out]
            adj[a] += g[:n]
            adj[b] += g[n:]
        tape.record(out, (a, b), back)
    return out


def dot(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Inner product of two rank-1 tensors, as a scalar tensor."""
    if a.array.ndim != 1 or b.array.ndim != 1:
        raise ShapeError(f"dot requires rank-1 tensors, got {a.shape} and {b.shape}")
    _require_same_shape(a, b, "dot")
    out = scalar(float(a.array.dot(b.array)))
    if tape is not None:
        def back(adj, a=a, b=b, out=out):
            g = adj[out][0]
            adj[a] += g * b.array
            adj[b] += g * a.array
        tape.record(out, (a, b), back)
    return out


def stack(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    """Stack scalar tensors into one rank-1 tensor."""
    if not parts:
        raise DomainError("stack of zero tensors")
    for p in parts:
        if p.size != 1:
            raise ShapeError(f"stack requires scalar tensors, got shape {p.shape}")
    out = Tensor(np.array([p.array[0] for p in parts], dtype=np.float64))
    if tape is not None:
        parts = tuple(parts)
        def back(adj, parts=parts, out=out):
            g = adj[out]
            for i, p in enumerate(parts):
                adj[p] += g[i : i + 1]
        tape.record(out, parts, back)
    return out


def weighted_sum(weights: Tensor, vectors: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    """Sum of ``weights[i] * vectors[i]`` over rank-1 vectors of equal length."""
    w = weights.array
    if w.ndim != 1 or len(vectors) != w.size:
        raise ShapeError(f"weighted_sum: {len(vectors)} vectors vs weight shape {weights.shape}")
    if w.size == 0:
        raise DomainError("weighted_sum of zero vectors")
    mat = np.stack([v.array for v in vectors])  # T x H
    out = Tensor(w.dot(mat))
    if tape is not None:
        vectors = tuple(vectors)
        def back(adj, weights=weights, vectors=vectors, out=out, mat=mat):
            g = adj[out]
            adj[weights] += mat.dot(g)
            w = weights.array
            for i, v in enumerate(vectors):
                adj[v] += w[i] * g
        tape.record(out, (weights,) + vectors, back)
    return out


def row(m: Tensor, index: int, tape: Tape | None = None) -> Tensor:
    """Select one row of a matrix (embedding lookup)."""
    if m.array.ndim != 2:
        raise ShapeError(f"row requires a rank-2 tensor, got shape {m.shape}")
    if not 0 <= index < m.array.shape[0]:
        raise DomainError(f"row index {index} out of range for {m.array.shape[0]} rows")
    out = Tensor(m.array[index].copy())
    if tape is not None:
        def back(adj, m=m, out=out, index=index):
            adj[m][index] += adj[out]
        tape.record(out, (m,), back)
    return out


@dataclass
class GradCheckReport:
    """Worst-case comparison of analytic vs central-difference gradients."""

    max_rel_error: float
    worst_parameter: str
    per_parameter: dict[str, float] = field(default_factory=dict)

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    forward: Callable[[Tape | None], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-4,
    tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of ``forward`` against central finite differences.

    ``forward`` must build the scalar loss from the current parameter values,
    recording on the given tape (or not, when passed None). Per coordinate the
    numeric gradient is (f(x+step) - f(x-step)) / (2*step) and the relative
    error is |a - n| / max(1e-8, |a| + |n|); the report carries the worst one.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    base1 = forward(None).item()
    base2 = forward(None).item()
    if base1 != base2:
        raise ContractError(f"forward is not deterministic: {base1!r} != {base2!r}")

    tape = Tape()
    loss = forward(tape)
    grads = tape.backward(loss)

    per_param: dict[str, float] = {}
    worst = 0.0
    worst_name = ""
    for name, p in params.items():
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.array)
        analytic = analytic.reshape(-1)
        flat = p.array.reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = forward(None).item()
            flat[i] = saved - step
            f_minus = forward(None).item()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > worst_here:
                worst_here = rel
        per_param[name] = worst_here
        if worst_here >= worst:
            worst = worst_here
            worst_name = name
    return GradCheckReport(max_rel_error=worst, worst_parameter=worst_name, per_parameter=per_param)
