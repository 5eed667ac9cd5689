# cython: language_level=3
"""Compiled hot loops: pairwise value similarity, single-query attention, RoPE.

Same contract as ``adsa._kernels_py``; results agree with it to rounding.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, cos, sin, pow

cnp.import_array()

cdef double DEGENERATE_NORM = 1e-12


def similarity(const double[:, ::1] values):
    cdef Py_ssize_t n = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, s
    S_arr = np.zeros((n, n), dtype=np.float64)
    avg_arr = np.zeros(n, dtype=np.float64)
    norms_arr = np.empty(n, dtype=np.float64)
    deg_arr = np.zeros(n, dtype=np.bool_)
    cdef double[:, ::1] S = S_arr
    cdef double[::1] avg = avg_arr
    cdef double[::1] norms = norms_arr
    cdef cnp.npy_bool[::1] deg = deg_arr

    for i in range(n):
        acc = 0.0
        for k in range(d):
            acc += values[i, k] * values[i, k]
        norms[i] = sqrt(acc)
        if norms[i] < DEGENERATE_NORM:
            deg[i] = 1

    for i in range(n):
        if deg[i]:
            continue
        for j in range(i + 1, n):
            if deg[j]:
                continue
            acc = 0.0
            for k in range(d):
                acc += values[i, k] * values[j, k]
            s = acc / (norms[i] * norms[j])
            if s > 1.0:
                s = 1.0
            elif s < -1.0:
                s = -1.0
            S[i, j] = s
            S[j, i] = s

    if n >= 2:
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += S[i, j]
            avg[i] = acc / (n - 1)
    return S_arr, avg_arr, deg_arr


def attend(const double[::1] q, const double[:, ::1] keys, const double[:, ::1] vals):
    cdef Py_ssize_t n = keys.shape[0]
    cdef Py_ssize_t d = keys.shape[1]
    cdef Py_ssize_t dv = vals.shape[1]
    cdef Py_ssize_t i, k
    cdef double acc, mx, total
    cdef double scale = 1.0 / sqrt(<double>d)
    if n == 0:
        raise ValueError("attention over an empty context")
    w_arr = np.empty(n, dtype=np.float64)
    out_arr = np.zeros(dv, dtype=np.float64)
    cdef double[::1] w = w_arr
    cdef double[::1] out = out_arr

    for i in range(n):
        acc = 0.0
        for k in range(d):
            acc += q[k] * keys[i, k]
        w[i] = acc * scale
    mx = w[0]
    for i in range(1, n):
        if w[i] > mx:
            mx = w[i]
    total = 0.0
    for i in range(n):
        w[i] = exp(w[i] - mx)
        total += w[i]
    for i in range(n):
        w[i] = w[i] / total
    for i in range(n):
        for k in range(dv):
            out[k] += w[i] * vals[i, k]
    return out_arr, w_arr


def rope(const double[::1] x, long pos, double theta_base):
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t i
    cdef double angle, c, s, a, b
    out_arr = np.empty(d, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(d // 2):
        angle = pos * pow(theta_base, -2.0 * i / d)
        c = cos(angle)
        s = sin(angle)
        a = x[2 * i]
        b = x[2 * i + 1]
        out[2 * i] = a * c - b * s
        out[2 * i + 1] = a * s + b * c
    return out_arr
