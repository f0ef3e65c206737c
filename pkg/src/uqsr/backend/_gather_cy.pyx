# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gather/scatter for the im2col convolution path.

Plain single-threaded C loops over hoisted raw pointers. Deliberately
free of any thread pool: the GEMMs around these calls run in the BLAS
pool, and mixing a second pool into the hot loop thrashes badly on the
slow-futex kernels this package targets. Arrays are channel-last
(n, X, Y, Z, c) C-contiguous float32/float64.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _gather(const real *x, real *col, int n, int X, int Y, int Z,
                  int cin, int k) noexcept nogil:
    cdef int Xo = X - k + 1, Yo = Y - k + 1, Zo = Z - k + 1
    cdef int bi, i, j, l, di, dj, dk, ci
    cdef const real *src
    cdef real *dst = col
    for bi in range(n):
        for i in range(Xo):
            for j in range(Yo):
                for l in range(Zo):
                    for di in range(k):
                        for dj in range(k):
                            src = x + ((((<Py_ssize_t> bi * X + i + di) * Y
                                         + j + dj) * Z + l) * cin)
                            for dk in range(k):
                                for ci in range(cin):
                                    dst[ci] = src[ci]
                                dst = dst + cin
                                src = src + cin


cdef void _scatter(real *gx, const real *gcol, int n, int X, int Y, int Z,
                   int cin, int k) noexcept nogil:
    cdef int Xo = X - k + 1, Yo = Y - k + 1, Zo = Z - k + 1
    cdef int bi, i, j, l, di, dj, dk, ci
    cdef real *dst
    cdef const real *src = gcol
    for bi in range(n):
        for i in range(Xo):
            for j in range(Yo):
                for l in range(Zo):
                    for di in range(k):
                        for dj in range(k):
                            dst = gx + ((((<Py_ssize_t> bi * X + i + di) * Y
                                          + j + dj) * Z + l) * cin)
                            for dk in range(k):
                                for ci in range(cin):
                                    dst[ci] += src[ci]
                                src = src + cin
                                dst = dst + cin


def gather(x, int k):
    cdef int n = x.shape[0], X = x.shape[1], Y = x.shape[2], Z = x.shape[3]
    cdef int cin = x.shape[4]
    cdef int P = n * (X - k + 1) * (Y - k + 1) * (Z - k + 1)
    col = np.empty((P, k ** 3 * cin), dtype=x.dtype)
    if x.dtype == np.float32:
        _gather_run[float](np.ascontiguousarray(x), col, k)
    else:
        _gather_run[double](np.ascontiguousarray(x), col, k)
    return col


cdef void _gather_run(real[:, :, :, :, ::1] x, real[:, ::1] col, int k):
    with nogil:
        _gather(&x[0, 0, 0, 0, 0], &col[0, 0], x.shape[0], x.shape[1],
                x.shape[2], x.shape[3], x.shape[4], k)


def scatter_add(gcol, in_shape, int k):
    gx = np.zeros(tuple(in_shape), dtype=gcol.dtype)
    if gcol.dtype == np.float32:
        _scatter_run[float](gx, np.ascontiguousarray(gcol), k)
    else:
        _scatter_run[double](gx, np.ascontiguousarray(gcol), k)
    return gx


cdef void _scatter_run(real[:, :, :, :, ::1] gx, real[:, ::1] gcol, int k):
    with nogil:
        _scatter(&gx[0, 0, 0, 0, 0], &gcol[0, 0], gx.shape[0], gx.shape[1],
                 gx.shape[2], gx.shape[3], gx.shape[4], k)
