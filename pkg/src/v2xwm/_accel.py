"""Optional numba acceleration.

Hot kernels are written twice: a loop version compiled with ``njit`` and a
vectorised numpy version. Setting ``V2XWM_DISABLE_NUMBA=1`` (or having no
numba installed) routes every call to the numpy path.
"""
import os

try:
    from numba import njit as _njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("V2XWM_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def optional_njit(*args, **kwargs):
    """``numba.njit`` when available, identity otherwise."""
    def decorator(func):
        if HAVE_NUMBA:
            return _njit(*args, **kwargs)(func)
        return func
    return decorator


def select(numba_impl, numpy_impl, use_numba=None):
    """Pick the implementation according to the global flag (or an override)."""
    flag = USE_NUMBA if use_numba is None else use_numba
    return numba_impl if flag else numpy_impl
