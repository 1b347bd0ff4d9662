"""Pure numpy implementations of the row kernels.

Signatures mirror the compiled ``_ckernels`` module exactly; inputs are
C-contiguous and the reduction axis is the last one.
"""
import numpy as np

GELU_C = 0.7978845608028654


def softmax_fwd(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(y, g):
    dot = (g * y).sum(axis=-1, keepdims=True)
    return y * (g - dot)


def layernorm_fwd(x, gamma, beta, eps):
    # statistics in float64 to match the compiled kernel's accumulators
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((x64 - mean) * rstd).astype(x.dtype)
    y = xhat * gamma + beta
    return y.astype(x.dtype), xhat, rstd[:, 0].astype(x.dtype)


def layernorm_bwd(g, xhat, rstd, gamma):
    k = g.shape[-1]
    gh = (g * gamma).astype(np.float64)
    s1 = gh.sum(axis=-1, keepdims=True) / k
    s2 = (gh * xhat).sum(axis=-1, keepdims=True) / k
    gx = rstd[:, None] * (gh - s1 - xhat * s2)
    ggamma = (g.astype(np.float64) * xhat).sum(axis=0)
    gbeta = g.astype(np.float64).sum(axis=0)
    return gx.astype(g.dtype), ggamma.astype(g.dtype), gbeta.astype(g.dtype)


def gelu_fwd(x):
    t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    return (0.5 * x * (1.0 + t)).astype(x.dtype)


def gelu_bwd(x, g):
    t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt)).astype(x.dtype)


def lcs_length(a, b):
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0
    prev = [0] * (m + 1)
    for i in range(1, n + 1):
        cur = [0] * (m + 1)
        ai = a[i - 1]
        for j in range(1, m + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = prev[j] if prev[j] >= cur[j - 1] else cur[j - 1]
        prev = cur
    return int(prev[m])
