"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise the numpy
fallback takes over. Set ``QVQA_PURE_PYTHON=1`` to force the fallback.
``BACKEND`` names the active implementation ("cython" or "numpy").
"""
import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "numpy"

if os.environ.get("QVQA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def _rows(x):
    """View ``x`` as a C-contiguous (rows, last) matrix."""
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_fwd(x):
    return _impl.softmax_fwd(_rows(x)).reshape(x.shape)


def softmax_bwd(y, g):
    return _impl.softmax_bwd(_rows(y), _rows(g.astype(y.dtype, copy=False))).reshape(y.shape)


def layernorm_fwd(x, gamma, beta, eps):
    """Returns (y, xhat, rstd); xhat/rstd are kept for the backward pass."""
    y, xhat, rstd = _impl.layernorm_fwd(
        _rows(x),
        np.ascontiguousarray(gamma, dtype=x.dtype),
        np.ascontiguousarray(beta, dtype=x.dtype),
        float(eps),
    )
    return y.reshape(x.shape), xhat, rstd


def layernorm_bwd(g, xhat, rstd, gamma):
    gx, gg, gb = _impl.layernorm_bwd(
        _rows(g.astype(xhat.dtype, copy=False)), xhat, rstd,
        np.ascontiguousarray(gamma, dtype=xhat.dtype),
    )
    return gx.reshape(g.shape), gg, gb


def gelu_fwd(x):
    flat = np.ascontiguousarray(x.reshape(-1))
    return _impl.gelu_fwd(flat).reshape(x.shape)


def gelu_bwd(x, g):
    flat = np.ascontiguousarray(x.reshape(-1))
    gflat = np.ascontiguousarray(g.reshape(-1), dtype=x.dtype)
    return _impl.gelu_bwd(flat, gflat).reshape(x.shape)


def lcs_length(a, b):
    """Length of the longest common subsequence of two integer sequences."""
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    return _impl.lcs_length(a, b)
