"""Backend selection for the hot numeric kernels.

Set ``DUALMPC_BACKEND=numpy`` to force the pure-numpy path, or
``DUALMPC_BACKEND=numba`` (the default when numba imports) for the
compiled one.  The choice is read once at import time; tests and the
benchmark switch backends explicitly through :func:`set_backend`.
"""

import os

from threadpoolctl import threadpool_limits

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def _initial_backend():
    requested = os.environ.get("DUALMPC_BACKEND", "").strip().lower()
    if requested == "numpy":
        return "numpy"
    if requested in ("", "numba", "auto"):
        return "numba" if HAS_NUMBA else "numpy"
    raise ValueError(f"DUALMPC_BACKEND must be 'numba' or 'numpy', got {requested!r}")


_backend = _initial_backend()


def get_backend():
    return _backend


def set_backend(name):
    """Switch the kernel backend at runtime ("numba" or "numpy")."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not importable in this environment")
    _backend = name


def set_threads(count):
    """Bound the BLAS and numba thread pools.

    The matrix-vector products inside the kernels run in BLAS; each output
    row is one dot product, so results do not depend on the thread count.
    """
    if not count:
        return
    count = max(1, int(count))
    threadpool_limits(limits=count)
    if HAS_NUMBA:
        numba.set_num_threads(min(count, numba.config.NUMBA_NUM_THREADS))


__all__ = ["HAS_NUMBA", "njit", "get_backend", "set_backend", "set_threads"]
