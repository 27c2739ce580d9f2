"""Hot inner loops, compiled with numba when it is available.

Both kernels are plain Python functions; when numba is importable and the
environment variable ``PARTMINE_DISABLE_NUMBA`` is not ``1`` they are wrapped
in ``numba.njit``.  The interpreted fallback executes the identical
statements in the identical order, so the two paths agree to floating-point
roundoff (the only divergence source is the BLAS dot product).
``benchmarks/bench_kernels.py`` times one path against the other.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag instead
    numba = None
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and os.environ.get("PARTMINE_DISABLE_NUMBA", "") != "1"


def _jit(func):
    if NUMBA_ENABLED:
        return numba.njit(cache=True, nogil=True)(func)
    return func


def kernel_mode():
    """Return "numba" when kernels run compiled, "interpreted" otherwise."""
    return "numba" if NUMBA_ENABLED else "interpreted"


@_jit
def dcd_sweep(X, y, cost, qdiag, alpha, w, order):
    """One dual coordinate descent pass for a cost-weighted hinge-loss SVM.

    Visits samples in the sequence given by ``order``, updating ``alpha`` and
    the primal vector ``w`` in place.  ``cost`` holds the per-sample upper
    box bound and ``qdiag`` the precomputed squared row norms.  Returns the
    largest projected-gradient violation seen during the pass; the caller
    sweeps until that drops below its tolerance.
    """
    max_viol = 0.0
    for k in range(order.shape[0]):
        i = order[k]
        g = y[i] * np.dot(X[i], w) - 1.0
        a = alpha[i]
        u = cost[i]
        if a <= 0.0:
            pg = g if g < 0.0 else 0.0
        elif a >= u:
            pg = g if g > 0.0 else 0.0
        else:
            pg = g
        apg = abs(pg)
        if apg > max_viol:
            max_viol = apg
        if apg > 1e-12:
            a_new = a - g / qdiag[i]
            if a_new < 0.0:
                a_new = 0.0
            elif a_new > u:
                a_new = u
            alpha[i] = a_new
            w += (a_new - a) * y[i] * X[i]
    return max_viol


@_jit
def heat_accumulate(grid, row_lo, row_hi, col_lo, col_hi, values):
    """Add ``values[i]`` to the grid cells ``[row_lo:row_hi, col_lo:col_hi)``.

    One rectangle per instance; rectangles may overlap, and cells are
    accumulated in instance order on both execution paths.
    """
    for i in range(values.shape[0]):
        grid[row_lo[i]:row_hi[i], col_lo[i]:col_hi[i]] += values[i]
