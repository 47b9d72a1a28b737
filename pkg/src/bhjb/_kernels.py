"""Hot inner loops, each with a numba and a pure numpy/scipy implementation.

The numba path is used when numba imports cleanly and the environment
variable ``BHJB_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are always
importable under ``*_numba`` / ``*_numpy`` names so tests and the benchmark
can compare them directly.
"""

import os

import numpy as np
from scipy.linalg import solve_banded

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False


def _env_disabled():
    return os.environ.get("BHJB_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = _HAVE_NUMBA and not _env_disabled()


def _njit(fn):
    if not _HAVE_NUMBA:
        return None
    return numba.njit(cache=True, nogil=True, error_model="numpy")(fn)


# --------------------------------------------------------------------------
# tridiagonal solve
#
# Row i reads  lower[i]*x[i-1] + diag[i]*x[i] + upper[i]*x[i+1] = rhs[i];
# lower[0] and upper[-1] are ignored.


def _thomas_py(lower, diag, upper, rhs):
    n = diag.shape[0]
    cp = np.empty(n)
    dp = np.empty(n)
    x = np.empty(n)
    beta = diag[0]
    cp[0] = upper[0] / beta if n > 1 else 0.0
    dp[0] = rhs[0] / beta
    for i in range(1, n):
        beta = diag[i] - lower[i] * cp[i - 1]
        if i < n - 1:
            cp[i] = upper[i] / beta
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / beta
    x[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


thomas_numba = _njit(_thomas_py)


def thomas_numpy(lower, diag, upper, rhs):
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, rhs, check_finite=False)


def solve_tridiagonal(lower, diag, upper, rhs):
    lower = np.ascontiguousarray(lower, dtype=np.float64)
    diag = np.ascontiguousarray(diag, dtype=np.float64)
    upper = np.ascontiguousarray(upper, dtype=np.float64)
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    if USE_NUMBA:
        return thomas_numba(lower, diag, upper, rhs)
    return thomas_numpy(lower, diag, upper, rhs)


# --------------------------------------------------------------------------
# killing test for one Euler step inside a box
#
# A path is killed when the new state leaves the open box, or, with the
# bridge correction on, when a Brownian bridge between the two in-box states
# crosses a face: per face the crossing probability is
# exp(-2 d0 d1 / var) with d0, d1 the distances of the endpoints to the face
# and var = 2 b_ii dt the per-axis step variance.


def _kill_step_py(x0, x1, lo, hi, var, u, use_bridge):
    npath, ndim = x1.shape
    killed = np.zeros(npath, dtype=np.bool_)
    for p in range(npath):
        out = False
        survive = 1.0
        for j in range(ndim):
            if x1[p, j] <= lo[j] or x1[p, j] >= hi[j]:
                out = True
                break
            if use_bridge and var[p, j] > 0.0:
                a = (x0[p, j] - lo[j]) * (x1[p, j] - lo[j])
                b = (hi[j] - x0[p, j]) * (hi[j] - x1[p, j])
                survive *= (1.0 - np.exp(-2.0 * a / var[p, j])) * (1.0 - np.exp(-2.0 * b / var[p, j]))
        if out:
            killed[p] = True
        elif use_bridge and u[p] >= survive:
            killed[p] = True
    return killed


kill_step_numba = _njit(_kill_step_py)


def kill_step_numpy(x0, x1, lo, hi, var, u, use_bridge):
    out = np.any((x1 <= lo) | (x1 >= hi), axis=1)
    if not use_bridge:
        return out
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        a = (x0 - lo) * (x1 - lo)
        b = (hi - x0) * (hi - x1)
        p_lo = np.where(var > 0.0, np.exp(-2.0 * a / var), 0.0)
        p_hi = np.where(var > 0.0, np.exp(-2.0 * b / var), 0.0)
    survive = np.prod((1.0 - p_lo) * (1.0 - p_hi), axis=1)
    return out | (u >= survive)


def kill_step(x0, x1, lo, hi, var, u, use_bridge=True):
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    x1 = np.ascontiguousarray(x1, dtype=np.float64)
    lo = np.ascontiguousarray(lo, dtype=np.float64)
    hi = np.ascontiguousarray(hi, dtype=np.float64)
    var = np.ascontiguousarray(var, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    if USE_NUMBA:
        return kill_step_numba(x0, x1, lo, hi, var, u, bool(use_bridge))
    return kill_step_numpy(x0, x1, lo, hi, var, u, bool(use_bridge))


# --------------------------------------------------------------------------
# nearest-node histogram (dual-cell counts) on a uniform grid


def _deposit_py(x, lo, h, shape, weights):
    npath, ndim = x.shape
    total = 1
    for j in range(ndim):
        total *= shape[j]
    out = np.zeros(total)
    for p in range(npath):
        flat = 0
        ok = True
        for j in range(ndim):
            idx = int(np.floor((x[p, j] - lo[j]) / h[j] + 0.5))
            if idx < 0 or idx >= shape[j]:
                ok = False
                break
            flat = flat * shape[j] + idx
        if ok:
            out[flat] += weights[p]
    return out


deposit_numba = _njit(_deposit_py)


def deposit_numpy(x, lo, h, shape, weights):
    idx = np.floor((x - lo) / h + 0.5).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.asarray(shape)), axis=1)
    flat = np.ravel_multi_index(tuple(idx[ok].T), tuple(shape))
    return np.bincount(flat, weights=weights[ok], minlength=int(np.prod(shape))).astype(np.float64)


def deposit_nearest(x, lo, h, shape, weights=None):
    """Sum ``weights`` of points ``x`` into the dual cells of a uniform grid."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if weights is None:
        weights = np.ones(x.shape[0])
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    lo = np.ascontiguousarray(lo, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    shape_arr = np.asarray(shape, dtype=np.int64)
    if USE_NUMBA:
        flat = deposit_numba(x, lo, h, shape_arr, weights)
    else:
        flat = deposit_numpy(x, lo, h, shape_arr, weights)
    return flat.reshape(tuple(shape))
