# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled one-sided Jacobi SVD kernel.

Operates on the transpose of the input so each column being rotated is a
contiguous row in memory.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def jacobi_rotate(double[:, ::1] work, double[:, ::1] vt, double tol, int max_sweeps):
    """Orthogonalize the rows of ``work`` in place, accumulating rotations in ``vt``.

    Returns the number of sweeps performed, or -1 if ``max_sweeps`` ran out.
    """
    cdef Py_ssize_t n = work.shape[0]
    cdef Py_ssize_t m = work.shape[1]
    cdef Py_ssize_t nv = vt.shape[1]
    cdef Py_ssize_t p, q, k
    cdef double alpha, beta, gamma, zeta, t, c, s, wp, wq
    cdef int sweep, rotated

    for sweep in range(max_sweeps):
        rotated = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    wp = work[p, k]
                    wq = work[q, k]
                    alpha += wp * wp
                    beta += wq * wq
                    gamma += wp * wq
                if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = 1
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    wp = work[p, k]
                    wq = work[q, k]
                    work[p, k] = c * wp - s * wq
                    work[q, k] = s * wp + c * wq
                for k in range(nv):
                    wp = vt[p, k]
                    wq = vt[q, k]
                    vt[p, k] = c * wp - s * wq
                    vt[q, k] = s * wp + c * wq
        if not rotated:
            return sweep + 1
    return -1
