"""Kernel backend selection.

Hot inner loops (tree growth, forest prediction, policy search) exist twice:
a numba @njit version and a vectorized pure-numpy version. The numba path is
used when numba imports cleanly and the environment variable IVFOREST_NO_NUMBA
is unset/0; setting IVFOREST_NO_NUMBA=1 forces the numpy fallback.
"""

from __future__ import annotations

import os

_TRUTHY = ("1", "true", "yes", "on")


def numba_requested() -> bool:
    return os.environ.get("IVFOREST_NO_NUMBA", "0").strip().lower() not in _TRUTHY


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def numba_enabled() -> bool:
    return numba_requested() and numba_available()


def backend_name() -> str:
    return "numba" if numba_enabled() else "numpy"
