"""Numba switch.

Hot loops are decorated with :func:`njit`. Setting ``MESHSPLAT_NUMBA=0`` in the
environment (before import) turns the decorator into a no-op, and modules that
carry a vectorized numpy twin of a kernel dispatch to that twin instead.
"""
from __future__ import annotations

import os

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and os.environ.get("MESHSPLAT_NUMBA", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity otherwise.

    Usable bare (``@njit``) or with options (``@njit(cache=True)``).
    """
    if args and callable(args[0]) and len(args) == 1 and not kwargs:
        fn = args[0]
        return _numba.njit(cache=True)(fn) if USE_NUMBA else fn

    kwargs.setdefault("cache", True)

    def wrap(fn):
        return _numba.njit(*args, **kwargs)(fn) if USE_NUMBA else fn

    return wrap


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
