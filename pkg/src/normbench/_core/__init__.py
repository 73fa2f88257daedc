"""Hot numerical kernels, compiled when available.

The Cython extension ``_ext`` is preferred. Setting ``NORMBENCH_PURE_PYTHON=1``
or an unbuilt extension selects the numpy/pure-Python fallback. ``BACKEND``
names the active one.
"""
import os

from . import _fallback

_compiled = None
if not os.environ.get("NORMBENCH_PURE_PYTHON"):
    try:
        from . import _ext as _compiled
    except ImportError:
        _compiled = None

if _compiled is not None:
    BACKEND = "cython"
    jacobi_eigvalsh = _compiled.jacobi_eigvalsh
    masked_moments = _compiled.masked_moments
else:
    BACKEND = "python"
    jacobi_eigvalsh = _fallback.jacobi_eigvalsh
    masked_moments = _fallback.masked_moments

__all__ = ["BACKEND", "jacobi_eigvalsh", "masked_moments"]
