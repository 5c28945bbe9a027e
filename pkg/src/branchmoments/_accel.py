"""Kernel acceleration switch.

Hot kernels are written once in the numba-compatible subset of Python and
decorated with :func:`kernel`.  When ``BRANCHMOMENTS_NUMBA=0`` (or numba is
missing) the decorator is the identity and the same source runs as plain
Python/numpy.  ``BRANCHMOMENTS_THREADS`` caps worker parallelism.
"""

import os

_threads_env = os.environ.get("BRANCHMOMENTS_THREADS")
if _threads_env:
    # must be set before numba is imported to allow more threads than cores
    os.environ.setdefault("NUMBA_NUM_THREADS", str(max(int(_threads_env), 1)))

# the bundled TBB is often too old for numba; the built-in pool is enough here
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

USE_NUMBA = os.environ.get("BRANCHMOMENTS_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if USE_NUMBA:
        import numba
except ImportError:  # pragma: no cover
    USE_NUMBA = False


def n_threads():
    """Worker count requested through ``BRANCHMOMENTS_THREADS`` (default 1)."""
    env = os.environ.get("BRANCHMOMENTS_THREADS")
    return max(int(env), 1) if env else 1


def kernel(fn=None, *, parallel=False):
    """``numba.njit(cache=True, nogil=True)`` or the identity, per the env flag."""

    def wrap(f):
        if not USE_NUMBA:
            return f
        return numba.njit(cache=True, nogil=True, parallel=parallel)(f)

    return wrap(fn) if fn is not None else wrap


def prange(*args):
    """``numba.prange`` inside compiled kernels, ``range`` in the fallback."""
    return range(*args)


if USE_NUMBA:
    prange = numba.prange  # noqa: F811

    _req = n_threads()
    if _req > 1:
        numba.set_num_threads(min(_req, numba.config.NUMBA_NUM_THREADS))


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
