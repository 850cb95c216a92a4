"""Backend selection for the stencil kernels.

The compiled ``_ckernels`` extension is preferred; the NumPy module
``_pykernels`` is used when the extension is missing or when the
environment variable ``TVB_PURE_PYTHON`` is set to a non-empty value
other than ``0``.
"""
import os

from . import _pykernels

_force_py = os.environ.get("TVB_PURE_PYTHON", "") not in ("", "0")

if _force_py:
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

grad = _impl.grad
grad_adjoint = _impl.grad_adjoint
project_balls = _impl.project_balls
pdhg_iterate = _impl.pdhg_iterate

FORWARD, BACKWARD, CENTERED = 0, 1, 2

__all__ = ["BACKEND", "grad", "grad_adjoint", "project_balls", "pdhg_iterate"]
