"""
Backend switch for the hot kernels.

``KCM_BACKEND=numpy`` (or a missing numba install) routes every kernel to its
pure-numpy implementation; the default is numba. Both paths must give
bit-identical results, which the test-suite checks.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _requested() -> str:
    name = os.environ.get("KCM_BACKEND", "numba").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"KCM_BACKEND must be 'numba' or 'numpy', got {name!r}")
    return name


BACKEND = _requested() if HAVE_NUMBA else "numpy"


def use_numba() -> bool:
    return BACKEND == "numba"


def set_backend(name: str) -> None:
    """Switch backends at runtime (tests and the benchmark use this)."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(name)
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    BACKEND = name


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise the identity decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f
