"""Hot numeric kernels with a numba fast path and a numpy fallback.

The backend is picked once at import time: numba when it imports cleanly and
the environment variable SKETCHANIM_NUMBA is not set to "0"/"off"/"false".
``set_backend`` rebinds the public entry points at runtime; the benchmark
script uses it to time both paths in one process.

Both backends are deterministic from run to run on one machine.  The numba
path additionally fixes every reduction to ascending-index order, so its
bits do not depend on thread count; the numpy path delegates matmul to BLAS,
whose summation order is an implementation detail of the installed library.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit, prange

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAS_NUMBA = False

    def njit(*args, **kwargs):  # no-op decorator stand-in
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap

    prange = range


def _f32c(a: np.ndarray) -> np.ndarray:
    """Contiguous float32 view (copies only when needed)."""
    return np.ascontiguousarray(a, dtype=np.float32)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _mm_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def _bmm_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a, b)


def _softmax2_numpy(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# numba implementations
#
# Loop order is i, k, j: the innermost j loop vectorizes without changing
# the per-element accumulation order over k (ascending), which is the
# determinism contract of the matmul op.
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def _mm_numba(a, b):  # pragma: no cover - compiled
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in prange(m):
        for k in range(kk):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]
    return out


@njit(cache=True, parallel=True)
def _bmm_numba(a, b):  # pragma: no cover - compiled
    nb, m, kk = a.shape
    n = b.shape[2]
    out = np.zeros((nb, m, n), dtype=np.float32)
    for t in prange(nb * m):
        bi = t // m
        i = t - bi * m
        for k in range(kk):
            aik = a[bi, i, k]
            for j in range(n):
                out[bi, i, j] += aik * b[bi, k, j]
    return out


@njit(cache=True, parallel=True)
def _softmax2_numba(x):  # pragma: no cover - compiled
    r, n = x.shape
    out = np.empty((r, n), dtype=np.float32)
    for i in prange(r):
        hi = x[i, 0]
        for j in range(1, n):
            if x[i, j] > hi:
                hi = x[i, j]
        s = np.float32(0.0)
        for j in range(n):
            out[i, j] = np.exp(x[i, j] - hi)
        for j in range(n):
            s += out[i, j]
        for j in range(n):
            out[i, j] /= s
    return out


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_IMPLS = {
    "numpy": {"mm": _mm_numpy, "bmm": _bmm_numpy, "softmax2": _softmax2_numpy},
}
if _HAS_NUMBA:
    _IMPLS["numba"] = {"mm": _mm_numba, "bmm": _bmm_numba, "softmax2": _softmax2_numba}


def _pick_default() -> str:
    flag = os.environ.get("SKETCHANIM_NUMBA", "").strip().lower()
    if flag in ("0", "off", "false"):
        return "numpy"
    return "numba" if _HAS_NUMBA else "numpy"


BACKEND = _pick_default()
_active = _IMPLS[BACKEND]


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_IMPLS))


def set_backend(name: str) -> None:
    """Rebind the kernel entry points.  Raises KeyError for unknown names."""
    global BACKEND, _active
    _active = _IMPLS[name]
    BACKEND = name


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[m,k] @ [k,n] -> [m,n], float32."""
    return _active["mm"](_f32c(a), _f32c(b))


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[B,m,k] @ [B,k,n] -> [B,m,n], float32."""
    return _active["bmm"](_f32c(a), _f32c(b))


def softmax2(x: np.ndarray) -> np.ndarray:
    """Row softmax of a 2-d array, numerically shifted by the row max."""
    return _active["softmax2"](_f32c(x))
