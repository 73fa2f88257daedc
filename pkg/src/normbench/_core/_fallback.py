"""Pure-Python versions of the compiled kernels (same signatures and results)."""
import math

import numpy as np


def jacobi_eigvalsh(a, tol, max_sweeps):
    """Cyclic Jacobi on symmetric ``a`` (modified in place)."""
    n = a.shape[0]
    total = math.sqrt(float(np.sum(a * a)))
    iu = np.triu_indices(n, 1)
    sweep = 0
    while True:
        off = math.sqrt(2.0 * float(np.sum(a[iu] ** 2)))
        if off <= tol * total:
            return np.diag(a).copy(), sweep, True
        if sweep >= max_sweeps:
            return np.diag(a).copy(), sweep, False
        sweep += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0


def masked_moments(x, mask):
    """Column mean / biased variance over rows where ``mask`` is set."""
    rows = x[mask.astype(bool)].astype(np.float64)
    m = rows.shape[0]
    if m == 0:
        d = x.shape[1]
        return np.zeros(d), np.zeros(d), 0
    mean = rows.sum(axis=0) / m
    var = ((rows - mean) ** 2).sum(axis=0) / m
    return mean, var, m
