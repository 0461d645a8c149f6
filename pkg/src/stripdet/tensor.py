"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps an immutable numpy array. Operations only record
themselves when a :class:`GradTape` is active, so inference runs without any
graph bookkeeping::

    x = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
    with GradTape() as tape:
        loss = (x * x).sum()
    grads = tape.backward(loss)
    grads[x]  # == 2 * x.data
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "tensor_new",
    "elementwise",
    "add",
    "mul",
    "scale",
    "tsum",
    "backward",
    "gradcheck",
    "GradcheckError",
]

FD_STEP = 1e-4
_REL_FLOOR = 1e-12

_state = threading.local()


class Tensor:
    """Immutable array value that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __getitem__(self, index: tuple[int, int, int, int]) -> float:
        return float(self.data[index])

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> Tensor:
        return tsum(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def tensor_new(dims: Sequence[int], fill: float | Iterable[float] = 0.0, dtype=np.float64) -> Tensor:
    """Build a rank-4 (batch, channels, height, width) tensor.

    ``fill`` is either a scalar broadcast to every element or a flat sequence
    in row-major order (batch outermost, width innermost).
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or any(d < 0 for d in dims):
        raise ValueError(f"dims must be four non-negative counts, got {dims}")
    expected = int(np.prod(dims))
    if np.isscalar(fill):
        return Tensor(np.full(dims, fill, dtype=dtype))
    flat = np.asarray(list(fill) if not isinstance(fill, np.ndarray) else fill, dtype=dtype).ravel()
    if flat.size != expected:
        raise ValueError(f"length mismatch: expected {expected} values for dims {dims}, got {flat.size}")
    return Tensor(flat.reshape(dims))


# --------------------------------------------------------------------------
# tape

@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered log of primitive operations executed while the tape is active.

    Records are appended in execution order, which is a topological order of
    the forward graph. A tape belongs to one thread.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> GradTape:
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs, output, backward_fn) -> None:
        self.records.append(_Record(tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> Gradients:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        keep: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self.records):
            g_out = grads.get(id(rec.output))
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.shape:
                    raise RuntimeError(f"gradient shape {g.shape} does not match value shape {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    keep[key] = t
        return Gradients(grads, keep)


class Gradients:
    """Mapping from tensors to their gradient arrays."""

    def __init__(self, grads: dict[int, np.ndarray], keep: dict[int, Tensor]):
        self._grads = grads
        self._keep = keep

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


def _tape_stack() -> list[GradTape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(tape: GradTape, loss: Tensor) -> Gradients:
    return tape.backward(loss)


def emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as the output of a primitive and record it if needed.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per entry of ``inputs``.
    """
    out = Tensor.__new__(Tensor)
    data = np.asarray(data)
    data.setflags(write=False)
    out.data = data
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


# --------------------------------------------------------------------------
# elementwise primitives

def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    return emit(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    ad, bd = a.data, b.data
    return emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, alpha: float) -> Tensor:
    return emit(a.data * alpha, (a,), lambda g: (g * alpha,))


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return emit(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g, dtype=a.dtype),))


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(a * weights)`` with ``weights`` held constant."""
    if weights.shape != a.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {weights.shape}")
    return emit(np.asarray((a.data * weights).sum()), (a,), lambda g: (g * weights,))


# --------------------------------------------------------------------------
# finite-difference checking

class GradcheckError(ArithmeticError):
    pass


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, step: float = FD_STEP) -> float:
    """Largest relative gap between the taped gradient and central differences.

    The error per element is ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    with GradTape() as tape:
        y = f(leaf)
    if not np.isfinite(y.data).all():
        raise GradcheckError("f produced a non-finite value")
    analytic = tape.backward(y)[leaf].ravel()

    numeric = np.empty(base.size)
    probe = base.copy()
    flat = probe.reshape(-1)
    for i in range(base.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(probe)).item()
        flat[i] = orig - step
        lo = f(Tensor(probe)).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise GradcheckError(f"f produced a non-finite value at element {i}")
        numeric[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
