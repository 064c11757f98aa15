"""Kernel backend selection.

The hot numeric kernels (2D convolution forward/backward, pooling, upsampling,
surface-distance reductions) exist twice: a numba-jitted implementation and a
pure-numpy implementation with identical signatures and semantics.

The active path is chosen once, lazily, from the MODASEG_BACKEND environment
variable:

    MODASEG_BACKEND=numba   require the jitted path (error if numba missing)
    MODASEG_BACKEND=numpy   force the pure-numpy fallback
    unset / auto            numba when importable, numpy otherwise

``benchmarks/bench_kernels.py`` times both paths side by side.
"""

from __future__ import annotations

import os

from .errors import ConfigError

_ENV_VAR = "MODASEG_BACKEND"
_active = None


def _resolve():
    requested = os.environ.get(_ENV_VAR, "auto").strip().lower() or "auto"
    if requested not in ("auto", "numba", "numpy"):
        raise ConfigError(f"{_ENV_VAR} must be 'numba', 'numpy' or unset, got {requested!r}")
    if requested == "numpy":
        from . import _kernels_numpy as impl
        return "numpy", impl
    try:
        from . import _kernels_numba as impl
        return "numba", impl
    except ImportError:
        if requested == "numba":
            raise ConfigError(f"{_ENV_VAR}=numba but numba is not importable")
        from . import _kernels_numpy as impl
        return "numpy", impl


def kernels():
    """Return the active kernel module (resolved once per process)."""
    global _active
    if _active is None:
        _active = _resolve()
    return _active[1]


def active_backend() -> str:
    """Name of the active kernel path: 'numba' or 'numpy'."""
    global _active
    if _active is None:
        _active = _resolve()
    return _active[0]
