"""Kernel backend selection.

The depthwise correlation kernels that dominate training time exist twice:
a numba ``@njit`` build (:mod:`lapseg.kernels.numba_impl`) and a vectorised
pure-numpy build (:mod:`lapseg.kernels.numpy_impl`). Both share one function
surface and produce bit-identical results (same tap accumulation order).

Selection happens once, at first use, from the ``LAPSEG_BACKEND`` environment
variable:

* ``numba``  - require the jitted kernels, raise if numba is unusable
* ``numpy``  - force the pure-numpy fallback
* unset/auto - try numba, silently fall back to numpy

``benchmarks/bench_kernels.py`` times the two builds against each other.
"""

from __future__ import annotations

import os

_ENV_VAR = "LAPSEG_BACKEND"
_kernels = None
_name = None


def _select():
    global _kernels, _name
    choice = os.environ.get(_ENV_VAR, "auto").strip().lower() or "auto"
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"{_ENV_VAR} must be 'numba', 'numpy' or unset, got {choice!r}"
        )
    if choice in ("auto", "numba"):
        try:
            from .kernels import numba_impl

            _kernels, _name = numba_impl, "numba"
            return
        except Exception:
            if choice == "numba":
                raise
    from .kernels import numpy_impl

    _kernels, _name = numpy_impl, "numpy"


def get_kernels():
    """Return the active kernel implementation module."""
    if _kernels is None:
        _select()
    return _kernels


def backend_name() -> str:
    """Name of the active backend: ``"numba"`` or ``"numpy"``."""
    if _kernels is None:
        _select()
    return _name
