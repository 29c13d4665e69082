"""Hot numeric kernels: numba-compiled inner loops with a pure-numpy fallback.

Backend selection happens once at import time via the HYBRIDRANK_BACKEND
environment variable: "numba" (default when numba imports cleanly) or
"numpy". Both backends implement the exact same reduction order -- a
sequential float64 accumulation over coordinates -- so scores are
bit-identical across backends, across database shardings, and against a
naive per-item loop.
"""
from __future__ import annotations

import os

import numpy as np

_requested = os.environ.get("HYBRIDRANK_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"HYBRIDRANK_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

_numba_ok = False
if _requested == "numba":
    try:
        from numba import njit  # noqa: F401

        _numba_ok = True
    except ImportError:
        _numba_ok = False

BACKEND = "numba" if _numba_ok else "numpy"


def _dot_scores_numpy(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    # sequential accumulation over coordinates; order must match the numba path
    m64 = matrix.astype(np.float64)
    out = np.zeros(matrix.shape[0], dtype=np.float64)
    for t in range(matrix.shape[1]):
        out += m64[:, t] * query[t]
    return out


if BACKEND == "numba":

    @njit(cache=True)
    def _dot_scores_numba(matrix, query):
        n, d = matrix.shape
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            s = 0.0
            for t in range(d):
                s += np.float64(matrix[i, t]) * query[t]
            out[i] = s
        return out

    def dot_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
        """Per-row dot products of a float32 matrix against a float64 query."""
        return _dot_scores_numba(np.ascontiguousarray(matrix), np.ascontiguousarray(query))

else:

    def dot_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
        """Per-row dot products of a float32 matrix against a float64 query."""
        return _dot_scores_numpy(matrix, query)
