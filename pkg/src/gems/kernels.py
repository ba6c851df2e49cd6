"""Sparse kernel dispatch.

The compiled extension is used when it imported cleanly; otherwise, or when
``GEMS_KERNELS=python`` is set, the numpy fallback runs. ``use_backend``
switches at runtime (benchmarks and equivalence tests use it).
"""
from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

AVAILABLE = ("compiled", "python") if _compiled is not None else ("python",)
_active = _fallback
BACKEND = "python"


def use_backend(name: str) -> None:
    global _active, BACKEND
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active, BACKEND = _compiled, "compiled"
    elif name == "python":
        _active, BACKEND = _fallback, "python"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


@contextmanager
def backend(name: str):
    previous = BACKEND
    use_backend(name)
    try:
        yield
    finally:
        use_backend(previous)


use_backend("python" if _compiled is None or os.environ.get("GEMS_KERNELS") == "python" else "compiled")


def _c(a, dtype=None):
    return np.ascontiguousarray(a, dtype=dtype)


def spmm(indptr, indices, weights, x, n_rows: int) -> np.ndarray:
    """out[i, h, :] = sum_j weights[j, h] * x[indices[j], h, :] over row i's entries."""
    x = _c(x)
    return _active.spmm(_c(indptr, np.int64), _c(indices, np.int64), _c(weights, x.dtype), x, int(n_rows))


def sddmm(indptr, indices, a, b) -> np.ndarray:
    """out[j, h] = <a[row(j), h, :], b[indices[j], h, :]>."""
    a = _c(a)
    return _active.sddmm(_c(indptr, np.int64), _c(indices, np.int64), a, _c(b, a.dtype))


def segment_softmax(indptr, logits) -> np.ndarray:
    return _active.segment_softmax(_c(indptr, np.int64), _c(logits))


def segment_softmax_backward(indptr, alpha, grad) -> np.ndarray:
    alpha = _c(alpha)
    return _active.segment_softmax_backward(_c(indptr, np.int64), alpha, _c(grad, alpha.dtype))


def scatter_add_rows(index, values, n_rows: int) -> np.ndarray:
    values = _c(values)
    return _active.scatter_add_rows(_c(index, np.int64), values, int(n_rows))
