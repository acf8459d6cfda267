"""Gather/scatter kernels: fallback equivalence, validation, edge cases."""

import numpy as np
import pytest

from pointgat import kernels


needs_ext = pytest.mark.skipif("ext" not in kernels.available_backends(),
                               reason="compiled extension not built")


def test_scatter_add_duplicate_rows():
    out = kernels.scatter_add_rows(np.array([[1.0], [2.0], [3.0]]), [0, 0, 1], 2)
    assert out.tolist() == [[3.0], [3.0]]


def test_scatter_add_preserves_trailing_shape():
    values = np.arange(24, dtype=np.float64).reshape(4, 3, 2)
    out = kernels.scatter_add_rows(values, [1, 1, 0, 2], 3)
    assert out.shape == (3, 3, 2)
    np.testing.assert_array_equal(out[1], values[0] + values[1])
    np.testing.assert_array_equal(out[0], values[2])


def test_scatter_add_1d_values():
    out = kernels.scatter_add_rows(np.array([1.0, 2.0, 4.0]), [2, 2, 0], 3)
    assert out.tolist() == [4.0, 0.0, 3.0]


def test_gather_rows_basic():
    src = np.arange(12, dtype=np.float64).reshape(4, 3)
    out = kernels.gather_rows(src, [3, 0, 0])
    np.testing.assert_array_equal(out, src[[3, 0, 0]])


def test_empty_edge_sets():
    assert kernels.scatter_add_rows(np.zeros((0, 5)), np.zeros(0, dtype=int), 3).shape == (3, 5)
    assert kernels.gather_rows(np.zeros((3, 5)), np.zeros(0, dtype=int)).shape == (0, 5)


def test_row_bounds_are_checked():
    with pytest.raises(IndexError):
        kernels.scatter_add_rows(np.ones((2, 1)), [0, 5], 3)
    with pytest.raises(IndexError):
        kernels.gather_rows(np.ones((3, 1)), [-1])
    with pytest.raises(ValueError):
        kernels.scatter_add_rows(np.ones((2, 1)), [0, 1, 2], 5)


@needs_ext
def test_backends_agree_bitwise():
    rng = np.random.default_rng(0)
    values = rng.normal(size=(500, 7))
    rows = rng.integers(0, 40, size=500)
    src = rng.normal(size=(40, 7))
    with kernels.use_backend("ext"):
        scatter_ext = kernels.scatter_add_rows(values, rows, 40)
        gather_ext = kernels.gather_rows(src, rows)
    with kernels.use_backend("numpy"):
        scatter_np = kernels.scatter_add_rows(values, rows, 40)
        gather_np = kernels.gather_rows(src, rows)
    # same ascending accumulation order on both paths: bitwise equal
    np.testing.assert_array_equal(scatter_ext, scatter_np)
    np.testing.assert_array_equal(gather_ext, gather_np)


def test_use_backend_restores_active():
    before = kernels.active_backend()
    with kernels.use_backend("numpy"):
        assert kernels.active_backend() == "numpy"
    assert kernels.active_backend() == before


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        with kernels.use_backend("gpu"):
            pass
