# cython: language_level=3
"""Compiled hot kernels.

Semantics mirror ``numpy_kernels.py`` exactly; keep both in sync. Reductions
accumulate in double precision regardless of input dtype.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, log, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double _INV_SQRT2 = 0.7071067811865476
cdef double _INV_SQRT_2PI = 0.3989422804014327


cdef object _empty1(Py_ssize_t n, bint single):
    return np.empty(n, dtype=np.float32 if single else np.float64)


cdef object _empty2(Py_ssize_t r, Py_ssize_t c, bint single):
    return np.empty((r, c), dtype=np.float32 if single else np.float64)


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out_np = _empty1(n, real is float)
    cdef real[::1] out = out_np
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = <real>(0.5 * v * (1.0 + erf(v * _INV_SQRT2)))
    return out_np


def gelu_bwd(real[::1] x, real[::1] gy):
    cdef Py_ssize_t i, n = x.shape[0]
    out_np = _empty1(n, real is float)
    cdef real[::1] out = out_np
    cdef double v, cdf, pdf
    for i in range(n):
        v = x[i]
        cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * exp(-0.5 * v * v)
        out[i] = <real>(gy[i] * (cdf + v * pdf))
    return out_np


def softmax_rows(real[:, ::1] x):
    cdef Py_ssize_t i, j, r = x.shape[0], c = x.shape[1]
    out_np = _empty2(r, c, real is float)
    cdef real[:, ::1] out = out_np
    cdef double m, s, e
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            e = exp(x[i, j] - m)
            out[i, j] = <real>e
            s += e
        for j in range(c):
            out[i, j] = <real>(out[i, j] / s)
    return out_np


def softmax_rows_bwd(real[:, ::1] p, real[:, ::1] gy):
    cdef Py_ssize_t i, j, r = p.shape[0], c = p.shape[1]
    out_np = _empty2(r, c, real is float)
    cdef real[:, ::1] out = out_np
    cdef double dot
    for i in range(r):
        dot = 0.0
        for j in range(c):
            dot += p[i, j] * gy[i, j]
        for j in range(c):
            out[i, j] = <real>(p[i, j] * (gy[i, j] - dot))
    return out_np


def lse_rows(real[:, ::1] x):
    cdef Py_ssize_t i, j, r = x.shape[0], c = x.shape[1]
    out_np = _empty1(r, real is float)
    cdef real[::1] out = out_np
    cdef double m, s
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            s += exp(x[i, j] - m)
        out[i] = <real>(m + log(s))
    return out_np


def layernorm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t i, j, r = x.shape[0], c = x.shape[1]
    y_np = _empty2(r, c, real is float)
    xhat_np = _empty2(r, c, real is float)
    rstd_np = _empty1(r, real is float)
    cdef real[:, ::1] y = y_np
    cdef real[:, ::1] xhat = xhat_np
    cdef real[::1] rstd = rstd_np
    cdef double mean, var, d, rs
    for i in range(r):
        mean = 0.0
        for j in range(c):
            mean += x[i, j]
        mean /= c
        var = 0.0
        for j in range(c):
            d = x[i, j] - mean
            var += d * d
        var /= c
        rs = 1.0 / sqrt(var + eps)
        rstd[i] = <real>rs
        for j in range(c):
            d = (x[i, j] - mean) * rs
            xhat[i, j] = <real>d
            y[i, j] = <real>(d * gain[j] + bias[j])
    return y_np, xhat_np, rstd_np


def layernorm_bwd(real[:, ::1] gy, real[:, ::1] xhat, real[::1] rstd,
                  real[::1] gain):
    cdef Py_ssize_t i, j, r = gy.shape[0], c = gy.shape[1]
    gx_np = _empty2(r, c, real is float)
    ggain_np = np.zeros(c, dtype=np.float32 if real is float else np.float64)
    gbias_np = np.zeros(c, dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] gx = gx_np
    cdef real[::1] ggain = ggain_np
    cdef real[::1] gbias = gbias_np
    cdef double m1, m2, gh
    for i in range(r):
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            gh = gy[i, j] * gain[j]
            m1 += gh
            m2 += gh * xhat[i, j]
        m1 /= c
        m2 /= c
        for j in range(c):
            gh = gy[i, j] * gain[j]
            gx[i, j] = <real>(rstd[i] * (gh - m1 - xhat[i, j] * m2))
            ggain[j] += <real>(gy[i, j] * xhat[i, j])
            gbias[j] += gy[i, j]
    return gx_np, ggain_np, gbias_np


def levenshtein(cnp.int64_t[::1] a, cnp.int64_t[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    cdef Py_ssize_t i, j
    cdef cnp.int64_t sub, best
    prev_np = np.arange(m + 1, dtype=np.int64)
    cur_np = np.empty(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] prev = prev_np
    cdef cnp.int64_t[::1] cur = cur_np
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            if sub < best:
                best = sub
            cur[j] = best
        prev, cur = cur, prev
        prev_np, cur_np = cur_np, prev_np
    return int(prev[m])
