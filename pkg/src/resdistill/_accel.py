"""Numba dispatch switch.

Hot kernels are written twice: a numba ``@njit`` version and a pure-numpy
version. ``RESDISTILL_NUMBA=0`` in the environment forces the numpy path;
otherwise numba is used when it imports.
"""
import os

_flag = os.environ.get("RESDISTILL_NUMBA", "1").strip().lower()

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, else an identity decorator.

    Applied to the numba flavour of each kernel regardless of the flag so the
    benchmark can compare both paths inside one process.
    """
    if HAVE_NUMBA:
        from numba import njit as _njit

        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
