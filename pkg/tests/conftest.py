import numpy as np
import pytest

from normbench import _core
from normbench._core import _fallback

BACKENDS = {"python": _fallback}
if _core.BACKEND == "cython":
    from normbench._core import _ext

    BACKENDS["cython"] = _ext


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return BACKENDS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_report_header(config):
    return f"normbench kernel backend: {_core.BACKEND}"


@pytest.fixture(params=sorted(BACKENDS))
def active_backend(request, monkeypatch):
    """Route the library's kernel calls through one backend for the test."""
    mod = BACKENDS[request.param]
    monkeypatch.setattr(_core, "jacobi_eigvalsh", mod.jacobi_eigvalsh)
    monkeypatch.setattr(_core, "masked_moments", mod.masked_moments)
    return request.param
