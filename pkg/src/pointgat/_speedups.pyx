# cython: boundscheck=False, wraparound=False, nonecheck=False, cdivision=True
"""Hot inner loops for edge gather and ordered row scatter-add.

The Python wrappers in pointgat.kernels validate dtypes, contiguity and
row bounds before calling in here, so these loops are branch-free.
Scatter accumulation runs in ascending edge order, which keeps repeated
runs bitwise identical to the numpy fallback.
"""


def scatter_add_rows(const double[:, ::1] values, const long long[::1] rows,
                     double[:, ::1] out):
    cdef Py_ssize_t e, m, r
    cdef Py_ssize_t n_edges = values.shape[0]
    cdef Py_ssize_t width = values.shape[1]
    for e in range(n_edges):
        r = <Py_ssize_t> rows[e]
        for m in range(width):
            out[r, m] += values[e, m]


def gather_rows(const double[:, ::1] src, const long long[::1] rows,
                double[:, ::1] out):
    cdef Py_ssize_t e, m, r
    cdef Py_ssize_t n_edges = rows.shape[0]
    cdef Py_ssize_t width = src.shape[1]
    for e in range(n_edges):
        r = <Py_ssize_t> rows[e]
        for m in range(width):
            out[e, m] = src[r, m]
