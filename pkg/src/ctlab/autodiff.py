"""Dense float64 tensors with taped reverse-mode automatic differentiation.

This is the numerical substrate for the whole package: an immutable
:class:`Tensor` value type, a :class:`Tape` that records primitive
operations while active, :func:`backward` for reverse-mode gradient
accumulation, and :func:`finite_difference_gradient` as the independent
oracle the test suite checks analytic gradients against.

Conventions:

* everything is float64;
* broadcasting follows numpy's trailing-dimension alignment rule and
  nothing richer;
* tensors are values and are never mutated after construction; a tape is
  single-owner and must not be shared between threads.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy import special as _sp

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "as_tensor",
    "add",
    "subtract",
    "multiply",
    "matmul",
    "scale",
    "square",
    "sqrt",
    "exp",
    "log",
    "softplus",
    "gelu",
    "erf",
    "concatenate",
    "broadcast_to",
    "clip_min",
    "stop_gradient",
    "backward",
    "finite_difference_gradient",
    "fd_relative_error",
]

# Toggle for the post-operation finiteness checks. On by default; the
# training hot loop turns them off per step and enforces finiteness at the
# step boundary instead (total loss and joint gradient norm).
FINITE_CHECKS = True


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable or disable per-operation finiteness checks."""
    global FINITE_CHECKS
    previous = FINITE_CHECKS
    FINITE_CHECKS = enabled
    try:
        yield
    finally:
        FINITE_CHECKS = previous

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class DomainError(ValueError):
    """Raised when an input lies outside a primitive's domain."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or infinite entries."""


class Tensor:
    """Immutable dense array of 64-bit reals (row-major)."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite data")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a size-1 tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    # operator sugar; scalars go through `scale`/constant tensors
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, as_tensor(other))

    def __rsub__(self, other):
        return subtract(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division is only supported by a python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    """Wrap scalars/arrays as a Tensor; pass tensors through unchanged."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _wrap(arr: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr
    return out


class _Node:
    __slots__ = ("op", "parents", "vjp", "value")

    def __init__(self, op, parents, vjp, value):
        self.op = op
        self.parents = parents  # indices of parents on the same tape
        self.vjp = vjp  # None for leaves
        self.value = value


class Tape:
    """Ordered record of primitive operations for reverse-mode differentiation.

    Nodes are appended in execution order, so every node's parents precede
    it and a single reverse sweep visits each node exactly once. Use as a
    context manager; operations executed outside any active tape compute
    values without recording.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("tape context exited out of order")
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, *tensors: Tensor) -> None:
        """Register tensors as leaves so gradients can be queried for them."""
        for t in tensors:
            self._leaf(t)

    def index_of(self, tensor: Tensor):
        return self._index.get(id(tensor))

    def _leaf(self, tensor: Tensor) -> int:
        idx = self._index.get(id(tensor))
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None, tensor))
            self._index[id(tensor)] = idx
        return idx

    def _record(self, op: str, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        pidx = tuple(self._leaf(p) for p in parents)
        self._index[id(out)] = len(self.nodes)
        self.nodes.append(_Node(op, pidx, vjp, out))


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(op: str, out: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if FINITE_CHECKS and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    result = _wrap(out)
    tape = _active_tape()
    if tape is not None:
        tape._record(op, result, parents, vjp)
    return result


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _finish("add", a.data + b.data, (a, b), vjp)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("subtract", a, b)
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _finish("subtract", a.data - b.data, (a, b), vjp)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("multiply", a, b)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)

    return _finish("multiply", ad * bd, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _finish("matmul", ad @ bd, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def vjp(g):
        return (g * s,)

    return _finish("scale", a.data * s, (a,), vjp)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _finish("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= shape[ax]
    inv = 1.0 / count

    def vjp(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg * inv, shape).copy(),)

    return _finish("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def vjp(g):
        return (2.0 * ad * g,)

    return _finish("square", ad * ad, (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * out),)

    return _finish("sqrt", out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow handled by the finiteness check
        out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _finish("exp", out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _finish("log", np.log(ad), (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def vjp(g):
        return (g * _sp.expit(ad),)

    return _finish("softplus", np.logaddexp(0.0, ad), (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """GeLU in its exact error-function form, x * Phi(x)."""
    a = as_tensor(a)
    ad = a.data
    cdf = 0.5 * (1.0 + _sp.erf(ad / _SQRT2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * ad * ad)
        return (g * (cdf + ad * pdf),)

    return _finish("gelu", ad * cdf, (a,), vjp)


def erf(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def vjp(g):
        return (g * _TWO_OVER_SQRT_PI * np.exp(-ad * ad),)

    return _finish("erf", _sp.erf(ad), (a,), vjp)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concatenate of an empty sequence")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            i != (axis % len(ref)) and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(
                f"concatenate: shape {t.shape} incompatible with {ref} on axis {axis}"
            )
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(ts))
        )

    return _finish("concatenate", np.concatenate([t.data for t in ts], axis=axis), tuple(ts), vjp)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing as a differentiable primitive."""
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[key]
    except IndexError as err:
        raise ShapeError(f"slice: invalid index {key!r} for shape {shape}") from err

    def vjp(g):
        gz = np.zeros(shape)
        gz[key] = g
        return (gz,)

    return _finish("slice", np.ascontiguousarray(out), (a,), vjp)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    ash = a.shape

    def vjp(g):
        return (_unbroadcast(g, ash),)

    return _finish("broadcast", np.ascontiguousarray(out), (a,), vjp)


def clip_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise max(a, lo); gradient is zero on the clipped set."""
    a = as_tensor(a)
    lo = float(lo)
    ad = a.data

    def vjp(g):
        return (g * (ad > lo),)

    return _finish("clip_min", np.maximum(ad, lo), (a,), vjp)


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, fresh identity: reverse-mode flow stops here."""
    return _wrap(as_tensor(a).data)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


class GradientMap:
    """Gradients of a scalar root with respect to tensors on a tape."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def wrt(self, tensor: Tensor) -> Tensor:
        """Gradient for `tensor`; zeros if it never reached the root."""
        idx = self._tape.index_of(tensor)
        g = self._grads.get(idx) if idx is not None else None
        if g is None:
            return _wrap(np.zeros(tensor.shape))
        return _wrap(g)


def backward(tape: Tape, root: Tensor) -> GradientMap:
    """Reverse sweep over the tape from a scalar root.

    Each node is visited exactly once; cotangents accumulate by summation
    in reverse execution order, which is a valid reverse topological order
    because parents are always recorded before their consumers.
    """
    if root.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.shape}")
    ridx = tape.index_of(root)
    result: dict[int, np.ndarray] = {}
    if ridx is None:
        return GradientMap(tape, result)
    pending: dict[int, np.ndarray] = {ridx: np.ones_like(root.data)}
    for idx in range(ridx, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        result[idx] = g
        node = tape.nodes[idx]
        if node.vjp is None:
            continue
        for pidx, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            acc = pending.get(pidx)
            pending[pidx] = pg if acc is None else acc + pg
    return GradientMap(tape, result)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def _scalar_value(y) -> float:
    if isinstance(y, Tensor):
        return y.item()
    return float(y)


def finite_difference_gradient(
    f: Callable[[Tensor], float | Tensor], x: Tensor, h: float = 1e-5
) -> Tensor:
    """Central-difference gradient estimate of a scalar function of x."""
    if h <= 0.0:
        raise ValueError(f"finite differences need h > 0, got {h}")
    base = np.asarray(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        up = _scalar_value(f(_wrap(bumped.reshape(base.shape))))
        bumped[i] = flat[i] - h
        down = _scalar_value(f(_wrap(bumped.reshape(base.shape))))
        grad[i] = (up - down) / (2.0 * h)
    return _wrap(grad.reshape(base.shape))


def fd_relative_error(analytic, numeric, floor: float = 1e-4) -> float:
    """Max elementwise relative error with a floor against FD roundoff noise."""
    a = analytic.data if isinstance(analytic, Tensor) else np.asarray(analytic)
    n = numeric.data if isinstance(numeric, Tensor) else np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
