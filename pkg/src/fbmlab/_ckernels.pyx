# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see ``_kernels`` for the contracts."""
import numpy as np
from libc.math cimport sqrt, pow


def holder_seminorm(double[::1] times, double[:, ::1] values, double gamma):
    cdef Py_ssize_t K = values.shape[0], d = values.shape[1]
    cdef Py_ssize_t u, v, q
    cdef double best = 0.0, num, diff, ratio
    for u in range(1, K):
        for v in range(u):
            num = 0.0
            for q in range(d):
                diff = values[u, q] - values[v, q]
                num += diff * diff
            ratio = sqrt(num) / pow(times[u] - times[v], gamma)
            if ratio > best:
                best = ratio
    return best


def propagate_dbeta(double[:, :, :, ::1] A, double[:, :, :, ::1] A2,
                    double[:, :, :, :, ::1] Q, double[:, :, :, :, ::1] Q2,
                    double[:, :, :, :, ::1] jump, double[:, :, :, ::1] c,
                    bint heun=True):
    cdef Py_ssize_t P = A.shape[0], N = A.shape[1], n = A.shape[2]
    out_arr = np.zeros((P, N + 1, n, N + 1, n, n))
    cdef double[:, :, :, :, :, ::1] out = out_arr
    cdef double[:, ::1] Y = np.zeros((n, n))
    cdef double[:, ::1] Yp = np.zeros((n, n))
    cdef double[:, ::1] k1 = np.zeros((n, n))
    cdef double[:, ::1] k2 = np.zeros((n, n))
    cdef Py_ssize_t p, s, m, v, i, j, k, b
    cdef double acc
    for p in range(P):
        for s in range(N + 1):
            for m in range(n):
                for i in range(n):
                    for j in range(n):
                        Y[i, j] = jump[p, s, m, i, j]
                        out[p, s, m, s, i, j] = Y[i, j]
                for v in range(s, N):
                    for i in range(n):
                        for j in range(n):
                            acc = 0.0
                            for k in range(n):
                                acc += A[p, v, i, k] * Y[k, j]
                            for b in range(n):
                                acc += Q[p, v, b, i, j] * c[p, s, b, m]
                            k1[i, j] = acc
                    if heun:
                        for i in range(n):
                            for j in range(n):
                                Yp[i, j] = Y[i, j] + k1[i, j]
                        for i in range(n):
                            for j in range(n):
                                acc = 0.0
                                for k in range(n):
                                    acc += A2[p, v, i, k] * Yp[k, j]
                                for b in range(n):
                                    acc += Q2[p, v, b, i, j] * c[p, s, b, m]
                                k2[i, j] = acc
                        for i in range(n):
                            for j in range(n):
                                Y[i, j] += 0.5 * (k1[i, j] + k2[i, j])
                    else:
                        for i in range(n):
                            for j in range(n):
                                Y[i, j] += k1[i, j]
                    for i in range(n):
                        for j in range(n):
                            out[p, s, m, v + 1, i, j] = Y[i, j]
    return out_arr
