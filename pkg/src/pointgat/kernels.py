"""Row gather / scatter-add with a compiled fast path.

These two operations dominate the per-edge message passing (every layer
gathers node rows onto edges and scatters edge messages back onto
nodes).  A Cython extension provides the fast path; pure numpy
implementations are the fallback.  The backend is selected at import
time: the extension when it imports cleanly, numpy otherwise.  Set
``POINTGAT_KERNELS=numpy`` or ``POINTGAT_KERNELS=ext`` to force one.

Both backends accumulate in ascending row order, so results are bitwise
identical across backends and across runs.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

try:
    from . import _speedups
except ImportError:  # pragma: no cover - depends on the build
    _speedups = None


def _scatter_add_numpy(values, rows, out):
    np.add.at(out, rows, values)


def _gather_numpy(src, rows, out):
    np.take(src, rows, axis=0, out=out)


def _scatter_add_ext(values, rows, out):
    _speedups.scatter_add_rows(values, rows, out)


def _gather_ext(src, rows, out):
    _speedups.gather_rows(src, rows, out)


_IMPLS = {"numpy": (_scatter_add_numpy, _gather_numpy)}
if _speedups is not None:
    _IMPLS["ext"] = (_scatter_add_ext, _gather_ext)


def _resolve_backend() -> str:
    requested = os.environ.get("POINTGAT_KERNELS", "auto").strip().lower()
    if requested in ("", "auto"):
        return "ext" if _speedups is not None else "numpy"
    if requested == "ext" and _speedups is None:
        raise ImportError(
            "POINTGAT_KERNELS=ext but the pointgat._speedups extension is not built"
        )
    if requested not in _IMPLS:
        raise ValueError(f"unknown kernel backend {requested!r}")
    return requested


_backend = _resolve_backend()
_scatter_impl, _gather_impl = _IMPLS[_backend]


def active_backend() -> str:
    """Name of the backend currently dispatched to ('ext' or 'numpy')."""
    return _backend


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_IMPLS))


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch backends (used by tests and benchmarks)."""
    global _backend, _scatter_impl, _gather_impl
    if name not in _IMPLS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    saved = (_backend, _scatter_impl, _gather_impl)
    _backend = name
    _scatter_impl, _gather_impl = _IMPLS[name]
    try:
        yield
    finally:
        _backend, _scatter_impl, _gather_impl = saved


def _check_rows(rows, expected_len: int | None, num_rows: int) -> np.ndarray:
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    if rows.ndim != 1:
        raise ValueError(f"row indices must be 1-D, got shape {rows.shape}")
    if expected_len is not None and rows.shape[0] != expected_len:
        raise ValueError(
            f"row index count {rows.shape[0]} does not match value count {expected_len}"
        )
    if rows.size:
        lo, hi = int(rows.min()), int(rows.max())
        if lo < 0 or hi >= num_rows:
            raise IndexError(f"row index out of range [0, {num_rows}): saw {lo}..{hi}")
    return rows


def scatter_add_rows(values, rows, num_rows: int) -> np.ndarray:
    """Sum ``values[e]`` into row ``rows[e]`` of a fresh (num_rows, ...) array.

    ``values`` may have any trailing shape; accumulation runs in ascending
    ``e`` so duplicate targets add deterministically.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    rows = _check_rows(rows, values.shape[0], num_rows)
    out = np.zeros((num_rows,) + values.shape[1:])
    if values.size:
        width = int(np.prod(values.shape[1:], dtype=np.int64)) if values.ndim > 1 else 1
        _scatter_impl(values.reshape(values.shape[0], width), rows,
                      out.reshape(num_rows, width))
    return out


def gather_rows(src, rows) -> np.ndarray:
    """Select rows of ``src`` (any trailing shape) at the given indices."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    rows = _check_rows(rows, None, src.shape[0])
    out = np.empty((rows.shape[0],) + src.shape[1:])
    if out.size:
        width = int(np.prod(src.shape[1:], dtype=np.int64)) if src.ndim > 1 else 1
        _gather_impl(src.reshape(src.shape[0], width), rows,
                     out.reshape(rows.shape[0], width))
    return out
