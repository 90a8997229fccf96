"""Pure-numpy fallback for the hot kernels.

Must stay in lockstep with ``_fastkernels.pyx``; ``tests/test_kernels.py``
asserts numerical parity between the two backends.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU on a 1-D array."""
    return 0.5 * x * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))


def gelu_bwd(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
    pdf = x.dtype.type(_INV_SQRT_2PI) * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array, stabilized by max subtraction."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd(p: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = (p * gy).sum(axis=1, keepdims=True)
    return p * (gy - dot)


def lse_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp of a 2-D array."""
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def layernorm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Normalize each row to zero mean / unit variance, then apply affine.

    Returns (y, xhat, rstd) where xhat and rstd are the caches the backward
    pass needs.
    """
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layernorm_bwd(gy: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gain: np.ndarray):
    """Gradients of layernorm_fwd. Returns (gx, ggain, gbias)."""
    gxhat = gy * gain
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx, ggain, gbias


def levenshtein(a: np.ndarray, b: np.ndarray) -> int:
    """Unit-cost edit distance between two 1-D int64 id sequences."""
    n, m = len(a), len(b)
    prev = np.arange(m + 1, dtype=np.int64)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev, cur = cur, prev
    return int(prev[m])
