# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels for the tensor engine.

Every kernel works on C-contiguous 2-D arrays whose last axis is the
reduction axis. The numpy fallback in ``_kernels_py`` has the same
signatures and must stay numerically equivalent.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654  # sqrt(2 / pi)


cdef inline double _tanh(double u) nogil:
    # exp-based tanh is markedly faster than libm's; clamp keeps exp finite
    if u > 15.0:
        return 1.0
    if u < -15.0:
        return -1.0
    return 1.0 - 2.0 / (exp(2.0 * u) + 1.0)


cdef inline float _tanhf(float u) nogil:
    if u > 9.0:
        return 1.0
    if u < -9.0:
        return -1.0
    return 1.0 - 2.0 / (expf(2.0 * u) + 1.0)


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    cdef double mx, s
    out_np = np.empty((n, k), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_np
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, k):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(k):
            if real is float:
                out[i, j] = expf(<float>(x[i, j] - mx))
            else:
                out[i, j] = exp(x[i, j] - mx)
            s += out[i, j]
        s = 1.0 / s
        for j in range(k):
            out[i, j] = <real>(out[i, j] * s)
    return out_np


def softmax_bwd(real[:, ::1] y, real[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], k = y.shape[1], i, j
    cdef double dot
    out_np = np.empty((n, k), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_np
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += g[i, j] * y[i, j]
        for j in range(k):
            out[i, j] = <real>(y[i, j] * (g[i, j] - dot))
    return out_np


def layernorm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    cdef double mean, var, r, d
    dt = np.float32 if real is float else np.float64
    y_np = np.empty((n, k), dtype=dt)
    xhat_np = np.empty((n, k), dtype=dt)
    rstd_np = np.empty(n, dtype=dt)
    cdef real[:, ::1] y = y_np
    cdef real[:, ::1] xhat = xhat_np
    cdef real[::1] rstd = rstd_np
    for i in range(n):
        mean = 0.0
        for j in range(k):
            mean += x[i, j]
        mean /= k
        var = 0.0
        for j in range(k):
            d = x[i, j] - mean
            var += d * d
        var /= k
        r = 1.0 / sqrt(var + eps)
        rstd[i] = <real>r
        for j in range(k):
            xhat[i, j] = <real>((x[i, j] - mean) * r)
            y[i, j] = <real>(xhat[i, j] * gamma[j] + beta[j])
    return y_np, xhat_np, rstd_np


def layernorm_bwd(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], k = g.shape[1], i, j
    cdef double s1, s2, gh
    dt = np.float32 if real is float else np.float64
    gx_np = np.empty((n, k), dtype=dt)
    ggamma_acc = np.zeros(k, dtype=np.float64)
    gbeta_acc = np.zeros(k, dtype=np.float64)
    cdef real[:, ::1] gx = gx_np
    cdef double[::1] gg = ggamma_acc
    cdef double[::1] gb = gbeta_acc
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(k):
            gh = g[i, j] * gamma[j]
            s1 += gh
            s2 += gh * xhat[i, j]
            gg[j] += g[i, j] * xhat[i, j]
            gb[j] += g[i, j]
        s1 /= k
        s2 /= k
        for j in range(k):
            gh = g[i, j] * gamma[j]
            gx[i, j] = <real>(rstd[i] * (gh - s1 - xhat[i, j] * s2))
    return gx_np, ggamma_acc.astype(dt), gbeta_acc.astype(dt)


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, t
    out_np = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] out = out_np
    for i in range(n):
        v = x[i]
        if real is float:
            t = _tanhf(<float>(GELU_C * (v + 0.044715 * v * v * v)))
        else:
            t = _tanh(GELU_C * (v + 0.044715 * v * v * v))
        out[i] = <real>(0.5 * v * (1.0 + t))
    return out_np


def gelu_bwd(real[::1] x, real[::1] g):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, t, dt
    out_np = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] out = out_np
    for i in range(n):
        v = x[i]
        if real is float:
            t = _tanhf(<float>(GELU_C * (v + 0.044715 * v * v * v)))
        else:
            t = _tanh(GELU_C * (v + 0.044715 * v * v * v))
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        out[i] = <real>(g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt))
    return out_np


def lcs_length(const long[::1] a, const long[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    if n == 0 or m == 0:
        return 0
    prev_np = np.zeros(m + 1, dtype=np.int64)
    cur_np = np.zeros(m + 1, dtype=np.int64)
    cdef long[::1] prev = prev_np
    cdef long[::1] cur = cur_np
    cdef long[::1] tmp
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            elif prev[j] >= cur[j - 1]:
                cur[j] = prev[j]
            else:
                cur[j] = cur[j - 1]
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])
