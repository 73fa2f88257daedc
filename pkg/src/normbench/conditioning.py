"""Layer-wise conditioning of token-feature matrices.

For token features ``X`` of shape ``(N, d)`` with ``N > d``:
``c_p(X) = s_1 / s_ceil(p*d)`` and ``c_max(X) = s_1``, where ``s_i`` are the
singular values in descending order. Singular values come from a cyclic
Jacobi eigensolve of the ``d x d`` Gram matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _core

JACOBI_TOL = 1e-10
MAX_SWEEPS = 60


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConditionReport:
    layer_index: int
    step: int
    c_50: float
    c_80: float
    c_max: float


def reshape_tokens(x, mask=None) -> np.ndarray:
    """Stack the valid token vectors of ``x`` (``B x T x d``) row-wise."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected B x T x d features, got shape {x.shape}")
    d = x.shape[2]
    rows = x.reshape(-1, d) if mask is None else x[np.asarray(mask, dtype=bool)]
    if rows.shape[0] <= d:
        raise ValueError(f"need more valid tokens than features (N={rows.shape[0]}, d={d})")
    return rows


def symmetric_eigvals(a, tol: float = JACOBI_TOL, max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, descending."""
    work = np.array(a, dtype=np.float64, order="C", copy=True)
    if work.ndim != 2 or work.shape[0] != work.shape[1]:
        raise ValueError("expected a square matrix")
    eig, sweeps, ok = _core.jacobi_eigvalsh(work, tol, max_sweeps)
    if not ok:
        raise ConvergenceError(f"Jacobi eigensolve did not converge in {sweeps} sweeps")
    return np.sort(eig)[::-1]


def singular_values(x) -> np.ndarray:
    """Descending singular values of ``x`` (``N x d``, ``N > d``).

    Eigenvalues of the Gram matrix below ``d * eps_machine`` times the largest
    are below the resolution of this route and are reported as 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a matrix")
    n, d = x.shape
    if n <= d:
        raise ValueError(f"need N > d, got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite entries")
    eig = symmetric_eigvals(x.T @ x)
    floor = d * np.finfo(np.float64).eps * max(eig[0], 0.0)
    eig = np.where(eig <= floor, 0.0, eig)
    return np.sqrt(eig)


def c_p_from_spectrum(s, p: float) -> float:
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    s = np.asarray(s)
    k = math.ceil(p * len(s) - 1e-12)
    denom = s[k - 1]
    if denom <= 0:
        return math.inf
    return float(s[0] / denom)


def c_p(x, p: float) -> float:
    """Ratio of the largest to the ceil(p*d)-th singular value (inf if that is 0)."""
    return c_p_from_spectrum(singular_values(x), p)


def c_max(x) -> float:
    return float(singular_values(x)[0])


def condition_report(x, mask=None, layer_index: int = 0, step: int = 0) -> ConditionReport:
    s = singular_values(reshape_tokens(x, mask))
    return ConditionReport(layer_index, step, c_p_from_spectrum(s, 0.5), c_p_from_spectrum(s, 0.8), float(s[0]))
