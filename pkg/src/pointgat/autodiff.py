"""Reverse-mode automatic differentiation over dense float64 arrays.

The primitive set is exactly what the network's forward pass needs:
elementwise arithmetic, matrix products, reductions, row indexing
(gather / scatter-add), a few activations, safe vector norms, and the
per-channel cross product used to mix equivariant features.

Arrays are immutable once created.  Every operation returns a fresh
:class:`DiffArray` and, when a :class:`Tape` is active and any input is
tracked, records the node needed for the backward sweep.  A tape belongs
to a single evaluation; backward may run once per tape and accumulates
gradients in a fixed reverse order, so repeated runs are bitwise
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels

__all__ = [
    "DiffArray",
    "Tape",
    "ShapeMismatchError",
    "apply",
    "backward",
    "constant",
    "parameter",
    "finite_difference_check",
    "GradientCheckReport",
]


class ShapeMismatchError(ValueError):
    """Operands do not conform to a primitive's shape rule."""


class DiffArray:
    """Dense float64 array participating in reverse-mode differentiation.

    ``grad`` is populated lazily by :func:`backward` for tracked leaves.
    """

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values: np.ndarray, requires_grad: bool = False):
        self.values = values
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        """A writable copy of the underlying buffer."""
        return np.array(self.values)

    def sum(self, axis: int | None = None) -> "DiffArray":
        return apply("sum", self, axis=axis)

    def __repr__(self) -> str:
        tag = "param" if self.requires_grad else "const"
        return f"DiffArray(shape={self.shape}, {tag})"

    # arithmetic sugar; scalars multiply via the cheaper "scale" primitive
    def __add__(self, other):
        return apply("add", self, _coerce(other))

    def __radd__(self, other):
        return apply("add", _coerce(other), self)

    def __sub__(self, other):
        return apply("subtract", self, _coerce(other))

    def __rsub__(self, other):
        return apply("subtract", _coerce(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", self, factor=float(other))
        return apply("multiply", self, _coerce(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", self, factor=1.0 / float(other))
        return apply("divide", self, _coerce(other))

    def __rtruediv__(self, other):
        return apply("divide", _coerce(other), self)

    def __matmul__(self, other):
        return apply("matmul", self, _coerce(other))

    def __neg__(self):
        return apply("scale", self, factor=-1.0)


def _freeze(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def constant(values) -> DiffArray:
    """Wrap data as an untracked array (copied, then frozen)."""
    return DiffArray(_freeze(values), requires_grad=False)


def parameter(values) -> DiffArray:
    """Wrap data as a tracked leaf that will receive gradients."""
    return DiffArray(_freeze(values), requires_grad=True)


def _coerce(value) -> DiffArray:
    if isinstance(value, DiffArray):
        return value
    return constant(value)


def _result(values: np.ndarray, requires_grad: bool) -> DiffArray:
    values = np.asarray(values, dtype=np.float64)
    values.setflags(write=False)
    return DiffArray(values, requires_grad)


# --------------------------------------------------------------------------
# tape

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Append-only record of primitive applications for one evaluation."""

    def __init__(self):
        self._arrays: list[DiffArray] = []
        self._handles: dict[int, int] = {}
        self._nodes: list[tuple] = []  # (op, vjp, input handles, needs, out handle)
        self._produced: set[int] = set()
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must nest"

    def __len__(self) -> int:
        return len(self._nodes)

    def _handle_of(self, array: DiffArray) -> int:
        handle = self._handles.get(id(array))
        if handle is None:
            handle = len(self._arrays)
            self._arrays.append(array)
            self._handles[id(array)] = handle
        return handle

    def _record(self, op: str, vjp: Callable, inputs: tuple[DiffArray, ...],
                output: DiffArray) -> None:
        in_handles = tuple(self._handle_of(a) for a in inputs)
        needs = tuple(a.requires_grad for a in inputs)
        out_handle = self._handle_of(output)
        self._produced.add(out_handle)
        self._nodes.append((op, vjp, in_handles, needs, out_handle))


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(output: DiffArray, tape: Tape) -> dict[DiffArray, np.ndarray]:
    """Reverse sweep from a scalar output recorded on ``tape``.

    Returns a map from every tracked leaf that participated in the
    computation to its gradient (zeros when no path reached it).  The
    gradient is also stored on each leaf's ``grad`` attribute.  A tape
    can be swept exactly once.
    """
    if output.shape != ():
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    if tape._spent:
        raise RuntimeError("backward was already called on this tape")
    tape._spent = True
    out_handle = tape._handles.get(id(output))
    if out_handle is None:
        raise ValueError("output was not computed under this tape")

    grads: list[np.ndarray | None] = [None] * len(tape._arrays)
    grads[out_handle] = np.ones((), dtype=np.float64)

    for _op, vjp, in_handles, needs, node_out in reversed(tape._nodes):
        g = grads[node_out]
        if g is None:
            continue
        in_grads = vjp(g)
        for handle, grad, need in zip(in_handles, in_grads, needs):
            if not need or grad is None:
                continue
            grads[handle] = grad if grads[handle] is None else grads[handle] + grad

    result: dict[DiffArray, np.ndarray] = {}
    for handle, array in enumerate(tape._arrays):
        if not array.requires_grad or handle in tape._produced:
            continue
        grad = grads[handle]
        if grad is None:
            grad = np.zeros(array.shape)
        else:
            grad = np.broadcast_to(grad, array.shape).copy() if grad.shape != array.shape else np.array(grad)
        array.grad = grad
        result[array] = grad
    return result


# --------------------------------------------------------------------------
# primitives

_PRIMITIVES: dict[str, Callable] = {}


def _primitive(name: str):
    def register(fn):
        _PRIMITIVES[name] = fn
        return fn

    return register


def apply(op: str, *inputs, **params) -> DiffArray:
    """Apply the named primitive, recording a node when any input is tracked."""
    prim = _PRIMITIVES.get(op)
    if prim is None:
        raise ValueError(f"unknown primitive {op!r}")
    arrays = tuple(_coerce(x) for x in inputs)
    out_values, vjp = prim(*(a.values for a in arrays), **params)
    requires = any(a.requires_grad for a in arrays)
    out = _result(out_values, requires)
    tape = active_tape()
    if tape is not None and requires:
        tape._record(op, vjp, arrays, out)
    return out


def _broadcast_error(op: str, a, b) -> ShapeMismatchError:
    return ShapeMismatchError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad


@_primitive("add")
def _add(a, b):
    try:
        out = a + b
    except ValueError:
        raise _broadcast_error("add", a, b) from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, vjp


@_primitive("subtract")
def _subtract(a, b):
    try:
        out = a - b
    except ValueError:
        raise _broadcast_error("subtract", a, b) from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return out, vjp


@_primitive("multiply")
def _multiply(a, b):
    try:
        out = a * b
    except ValueError:
        raise _broadcast_error("multiply", a, b) from None

    def vjp(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, vjp


@_primitive("divide")
def _divide(a, b):
    try:
        out = a / b
    except ValueError:
        raise _broadcast_error("divide", a, b) from None

    def vjp(g):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)

    return out, vjp


@_primitive("scale")
def _scale(a, factor: float):
    out = a * factor

    def vjp(g):
        return (g * factor,)

    return out, vjp


@_primitive("matmul")
def _matmul(a, b):
    # supported: (m,k)@(k,n), (B,m,k)@(k,n), (m,k)@(k,), (k,)@(k,n), (k,)@(k,)
    ok = (1 <= a.ndim <= 3) and (1 <= b.ndim <= 2) and not (a.ndim == 3 and b.ndim == 1)
    if not ok or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}"
        )
    out = a @ b

    def vjp(g):
        if a.ndim == 1 and b.ndim == 1:
            return g * b, g * a
        if a.ndim == 1:  # (k,) @ (k,n)
            return b @ g, np.outer(a, g)
        if b.ndim == 1:  # (m,k) @ (k,)
            return np.outer(g, b), a.T @ g
        ga = g @ b.T
        if a.ndim == 2:
            gb = a.T @ g
        else:  # stacked (B,m,k) @ (k,n)
            gb = np.tensordot(a, g, axes=((0, 1), (0, 1)))
        return ga, gb

    return out, vjp


def _check_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeMismatchError(f"{op}: axis {axis} out of range for {ndim}-d input")
    return axis % ndim


@_primitive("sum")
def _sum(a, axis: int | None = None):
    if axis is not None:
        axis = _check_axis("sum", axis, a.ndim)
    out = a.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape),)

    return out, vjp


@_primitive("concat")
def _concat(*arrays, axis: int = 0):
    if not arrays:
        raise ShapeMismatchError("concat: needs at least one input")
    axis = _check_axis("concat", axis, arrays[0].ndim)
    for arr in arrays[1:]:
        if arr.ndim != arrays[0].ndim or (
            arr.shape[:axis] + arr.shape[axis + 1 :]
            != arrays[0].shape[:axis] + arrays[0].shape[axis + 1 :]
        ):
            raise ShapeMismatchError(
                f"concat: shapes {[a.shape for a in arrays]} differ off axis {axis}"
            )
    out = np.concatenate(arrays, axis=axis)
    offsets = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return out, vjp


@_primitive("slice")
def _slice(a, axis: int = 0, start: int = 0, stop: int | None = None):
    axis = _check_axis("slice", axis, a.ndim)
    stop = a.shape[axis] if stop is None else stop
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeMismatchError(
            f"slice: range [{start}, {stop}) invalid for axis {axis} of shape {a.shape}"
        )
    key = (slice(None),) * axis + (slice(start, stop),)
    out = a[key]

    def vjp(g):
        full = np.zeros(a.shape)
        full[key] = g
        return (full,)

    return out, vjp


@_primitive("gather")
def _gather(a, rows=None):
    out = kernels.gather_rows(a, rows)
    rows_arr = np.asarray(rows, dtype=np.int64)

    def vjp(g):
        return (kernels.scatter_add_rows(g, rows_arr, a.shape[0]),)

    return out, vjp


@_primitive("scatter_add")
def _scatter_add(values, rows=None, size: int = 0):
    out = kernels.scatter_add_rows(values, rows, size)
    rows_arr = np.asarray(rows, dtype=np.int64)

    def vjp(g):
        return (kernels.gather_rows(g, rows_arr),)

    return out, vjp


def _sigmoid_values(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_primitive("sigmoid")
def _sigmoid(x):
    out = _sigmoid_values(np.asarray(x))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return out, vjp


@_primitive("silu")
def _silu(x):
    sig = _sigmoid_values(np.asarray(x))
    out = x * sig

    def vjp(g):
        return (g * sig * (1.0 + x * (1.0 - sig)),)

    return out, vjp


@_primitive("sin")
def _sin(x):
    out = np.sin(x)

    def vjp(g):
        return (g * np.cos(x),)

    return out, vjp


@_primitive("cos")
def _cos(x):
    out = np.cos(x)

    def vjp(g):
        return (-g * np.sin(x),)

    return out, vjp


@_primitive("sqrt")
def _sqrt(x):
    if np.any(x < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x)

    def vjp(g):
        return (g / (2.0 * out),)

    return out, vjp


@_primitive("safe_norm")
def _safe_norm(a, axis: int = 0, eps: float = 1e-8):
    axis = _check_axis("safe_norm", axis, a.ndim)
    out = np.sqrt((a * a).sum(axis=axis) + eps * eps)

    def vjp(g):
        # d||a|| / da = a / ||a||; the eps term keeps this finite at a = 0
        return (np.expand_dims(g / out, axis) * a,)

    return out, vjp


@_primitive("cross")
def _cross(a, b, axis: int = 0):
    axis = _check_axis("cross", axis, a.ndim)
    if a.shape != b.shape or a.shape[axis] != 3:
        raise ShapeMismatchError(
            f"cross: needs equal shapes with size 3 on axis {axis}, "
            f"got {a.shape} and {b.shape}"
        )
    out = np.cross(a, b, axis=axis)

    def vjp(g):
        return np.cross(b, g, axis=axis), np.cross(g, a, axis=axis)

    return out, vjp


@_primitive("broadcast")
def _broadcast(a, axis: int = 0, size: int = 1):
    if not 0 <= axis <= a.ndim:
        raise ShapeMismatchError(f"broadcast: axis {axis} out of range for {a.ndim}-d input")
    expanded = np.expand_dims(a, axis)
    shape = list(expanded.shape)
    shape[axis] = size
    out = np.broadcast_to(expanded, shape)

    def vjp(g):
        return (g.sum(axis=axis),)

    return out, vjp


# --------------------------------------------------------------------------
# functional wrappers

def add(a, b) -> DiffArray:
    return apply("add", a, b)


def subtract(a, b) -> DiffArray:
    return apply("subtract", a, b)


def multiply(a, b) -> DiffArray:
    return apply("multiply", a, b)


def divide(a, b) -> DiffArray:
    return apply("divide", a, b)


def matmul(a, b) -> DiffArray:
    return apply("matmul", a, b)


def scale(a, factor: float) -> DiffArray:
    return apply("scale", a, factor=float(factor))


def sum_reduce(a, axis: int | None = None) -> DiffArray:
    return apply("sum", a, axis=axis)


def concat(arrays, axis: int = 0) -> DiffArray:
    return apply("concat", *arrays, axis=axis)


def split(a, sizes, axis: int = 0) -> tuple[DiffArray, ...]:
    """Cut an array into consecutive blocks of the given sizes along an axis."""
    a = _coerce(a)
    total = a.shape[_check_axis("split", axis, a.ndim)]
    if sum(sizes) != total:
        raise ShapeMismatchError(
            f"split: sizes {tuple(sizes)} do not sum to axis length {total}"
        )
    parts = []
    start = 0
    for size in sizes:
        parts.append(apply("slice", a, axis=axis, start=start, stop=start + size))
        start += size
    return tuple(parts)


def gather(a, rows) -> DiffArray:
    return apply("gather", a, rows=np.asarray(rows, dtype=np.int64))


def scatter_add(values, rows, size: int) -> DiffArray:
    return apply("scatter_add", values, rows=np.asarray(rows, dtype=np.int64), size=int(size))


def sigmoid(x) -> DiffArray:
    return apply("sigmoid", x)


def silu(x) -> DiffArray:
    return apply("silu", x)


def sin(x) -> DiffArray:
    return apply("sin", x)


def cos(x) -> DiffArray:
    return apply("cos", x)


def sqrt(x) -> DiffArray:
    return apply("sqrt", x)


def safe_norm(a, axis: int, eps: float = 1e-8) -> DiffArray:
    return apply("safe_norm", a, axis=axis, eps=float(eps))


def cross(a, b, axis: int) -> DiffArray:
    return apply("cross", a, b, axis=axis)


def expand(a, axis: int, size: int = 1) -> DiffArray:
    """Insert an axis and repeat along it (size 1 is a plain unsqueeze)."""
    return apply("broadcast", a, axis=axis, size=size)


# --------------------------------------------------------------------------
# gradient verification

@dataclass
class GradientCheckReport:
    """Outcome of comparing analytic gradients to central differences.

    ``max_rel_error`` is the pass metric: for each leaf, the largest
    componentwise |analytic - numeric| scaled by the leaf's largest
    gradient magnitude (floored at 1e-8).  ``max_componentwise_rel_error``
    scales each component by its own magnitude instead; it is reported
    for information only, because central differences at step 1e-5 carry
    an irreducible ~1e-11 absolute noise in float64, which makes the
    componentwise ratio blow up on any component whose true gradient is
    tiny but not exactly zero, regardless of gradient correctness.
    """

    max_rel_error: float
    tolerance: float
    step: float
    components: int
    max_componentwise_rel_error: float = 0.0
    worst_leaf: str = ""
    worst_index: int = -1
    analytic_at_worst: float = 0.0
    numeric_at_worst: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "max_componentwise_rel_error": self.max_componentwise_rel_error,
            "tolerance": self.tolerance,
            "step": self.step,
            "components": self.components,
            "worst_leaf": self.worst_leaf,
            "worst_index": self.worst_index,
            "analytic_at_worst": self.analytic_at_worst,
            "numeric_at_worst": self.numeric_at_worst,
            "pass": self.passed,
        }


def finite_difference_check(f, leaves, step: float = 1e-5, tolerance: float = 1e-6,
                            names=None) -> GradientCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` is a deterministic zero-argument callable returning a scalar
    DiffArray; it must read the given leaves, whose buffers are perturbed
    in place one component at a time (and restored afterwards).  A leaf
    that does not influence ``f`` yields bitwise-equal evaluations, hence
    an exact zero on both sides.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = list(leaves)
    if names is None:
        names = [f"leaf{i}" for i in range(len(leaves))]

    with Tape() as tape:
        out = f()
    if out.shape != ():
        raise ValueError(f"finite_difference_check needs a scalar function, got shape {out.shape}")
    grad_map = backward(out, tape) if out.requires_grad else {}

    def evaluate() -> float:
        return float(f().values)

    report = GradientCheckReport(0.0, tolerance, step, 0)
    for leaf, name in zip(leaves, names):
        analytic = grad_map.get(leaf)
        if analytic is None:
            analytic = np.zeros(leaf.shape)
        flat_analytic = analytic.reshape(-1)
        leaf.values.setflags(write=True)
        flat_values = leaf.values.reshape(-1)
        leaf_diff = 0.0
        leaf_worst_index = -1
        leaf_numeric_max = 0.0
        numeric_at_leaf_worst = 0.0
        try:
            for i in range(flat_values.size):
                saved = flat_values[i]
                flat_values[i] = saved + step
                f_plus = evaluate()
                flat_values[i] = saved - step
                f_minus = evaluate()
                flat_values[i] = saved
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise ValueError(
                        f"non-finite function value while perturbing {name}[{i}]"
                    )
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(flat_analytic[i])
                diff = abs(a - numeric)
                report.components += 1
                leaf_numeric_max = max(leaf_numeric_max, abs(numeric))
                report.max_componentwise_rel_error = max(
                    report.max_componentwise_rel_error,
                    diff / max(abs(a), abs(numeric), 1e-8),
                )
                if diff > leaf_diff:
                    leaf_diff = diff
                    leaf_worst_index = i
                    numeric_at_leaf_worst = numeric
        finally:
            leaf.values.setflags(write=False)
        analytic_max = float(np.max(np.abs(flat_analytic))) if flat_analytic.size else 0.0
        leaf_rel = leaf_diff / max(analytic_max, leaf_numeric_max, 1e-8)
        if leaf_rel > report.max_rel_error:
            report.max_rel_error = leaf_rel
            report.worst_leaf = name
            report.worst_index = leaf_worst_index
            report.analytic_at_worst = float(flat_analytic[leaf_worst_index]) if leaf_worst_index >= 0 else 0.0
            report.numeric_at_worst = numeric_at_leaf_worst
    return report
