# cython: language_level=3
"""Compiled kernels: cyclic Jacobi eigenvalues and masked per-feature moments."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()

ctypedef fused real_t:
    float
    double


def jacobi_eigvalsh(double[:, ::1] a, double tol, int max_sweeps):
    """Eigenvalues of the symmetric matrix ``a`` (overwritten in place).

    Returns ``(eigenvalues, sweeps, converged)``.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, q, k
    cdef int sweep = 0
    cdef double off, total, apq, theta, t, c, s, akp, akq
    cdef bint converged = False

    total = 0.0
    for p in range(n):
        for q in range(n):
            total += a[p, q] * a[p, q]
    total = sqrt(total)

    while True:
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += 2.0 * a[p, q] * a[p, q]
        off = sqrt(off)
        if off <= tol * total:
            converged = True
            break
        if sweep >= max_sweeps:
            break
        sweep += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    akp = a[p, k]
                    akq = a[q, k]
                    a[p, k] = c * akp - s * akq
                    a[q, k] = s * akp + c * akq
                a[p, q] = 0.0
                a[q, p] = 0.0

    eig = np.empty(n, dtype=np.float64)
    for p in range(n):
        eig[p] = a[p, p]
    return eig, sweep, converged


def masked_moments(real_t[:, ::1] x, const unsigned char[::1] mask):
    """Per-column mean and biased variance over rows with ``mask != 0``.

    Accumulates in double precision. Returns ``(mean, var, count)``.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef Py_ssize_t m = 0
    cdef double diff
    mean_arr = np.zeros(d, dtype=np.float64)
    var_arr = np.zeros(d, dtype=np.float64)
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr

    for i in range(n):
        if mask[i]:
            m += 1
            for j in range(d):
                mean[j] += x[i, j]
    if m == 0:
        return mean_arr, var_arr, 0
    for j in range(d):
        mean[j] /= m
    for i in range(n):
        if mask[i]:
            for j in range(d):
                diff = x[i, j] - mean[j]
                var[j] += diff * diff
    for j in range(d):
        var[j] /= m
    return mean_arr, var_arr, m
