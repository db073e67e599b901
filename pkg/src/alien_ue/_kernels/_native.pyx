# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython kernels: fused rowwise softmax/entropy math.

Mirrors ``pyref`` exactly (same clamps, same formulas); rows are processed in
single fused passes without temporaries.
"""

import numpy as np

from libc.math cimport exp, log, log1p

cdef double LOG_EPS = 1e-12
cdef double BCE_EPS = 1e-7

BACKEND_NAME = "native"


def softmax_rows(object z_in):
    z_arr = np.ascontiguousarray(z_in, dtype=np.float64)
    out = np.empty_like(z_arr)
    cdef double[:, ::1] z = z_arr
    cdef double[:, ::1] p = out
    cdef Py_ssize_t n = z.shape[0], c = z.shape[1], i, j
    cdef double m, s
    for i in range(n):
        m = z[i, 0]
        for j in range(1, c):
            if z[i, j] > m:
                m = z[i, j]
        s = 0.0
        for j in range(c):
            p[i, j] = exp(z[i, j] - m)
            s += p[i, j]
        for j in range(c):
            p[i, j] /= s
    return out


def entropy_rows(object p_in):
    p_arr = np.ascontiguousarray(p_in, dtype=np.float64)
    out = np.empty(p_arr.shape[0], dtype=np.float64)
    cdef double[:, ::1] p = p_arr
    cdef double[::1] u = out
    cdef Py_ssize_t n = p.shape[0], c = p.shape[1], i, j
    cdef double invlogc = 1.0 / log(<double>c)
    cdef double h, pij
    for i in range(n):
        h = 0.0
        for j in range(c):
            pij = p[i, j]
            if pij < LOG_EPS:
                pij = LOG_EPS
            elif pij > 1.0:
                pij = 1.0
            h -= p[i, j] * log(pij)
        u[i] = h * invlogc
    return out


def entropy_grad_rows(object p_in):
    p_arr = np.ascontiguousarray(p_in, dtype=np.float64)
    out = np.empty_like(p_arr)
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] g = out
    cdef Py_ssize_t n = p.shape[0], c = p.shape[1], i, j
    cdef double invlogc = 1.0 / log(<double>c)
    cdef double h, pij
    for i in range(n):
        h = 0.0
        for j in range(c):
            pij = p[i, j]
            if pij < LOG_EPS:
                pij = LOG_EPS
            elif pij > 1.0:
                pij = 1.0
            g[i, j] = log(pij)
            h -= p[i, j] * g[i, j]
        for j in range(c):
            g[i, j] = -p[i, j] * (g[i, j] + h) * invlogc
    return out


def alien_backward_rows(object p_in, object err_in, object u_base_in, double alpha):
    p_arr = np.ascontiguousarray(p_in, dtype=np.float64)
    err_arr = np.ascontiguousarray(err_in, dtype=np.float64)
    ub_arr = np.ascontiguousarray(u_base_in, dtype=np.float64)
    u_out = np.empty(p_arr.shape[0], dtype=np.float64)
    dz_out = np.empty_like(p_arr)
    cdef double[:, ::1] p = p_arr
    cdef double[::1] err = err_arr
    cdef double[::1] u_base = ub_arr
    cdef double[::1] u = u_out
    cdef double[:, ::1] dz = dz_out
    cdef Py_ssize_t n = p.shape[0], c = p.shape[1], i, j
    cdef double invlogc = 1.0 / log(<double>c)
    cdef double h, pij, ui, u_cl, diff, dbce, du
    cdef double bce = 0.0, reg = 0.0
    for i in range(n):
        h = 0.0
        for j in range(c):
            pij = p[i, j]
            if pij < LOG_EPS:
                pij = LOG_EPS
            elif pij > 1.0:
                pij = 1.0
            dz[i, j] = log(pij)
            h -= p[i, j] * dz[i, j]
        ui = h * invlogc
        u[i] = ui

        u_cl = ui
        if u_cl < BCE_EPS:
            u_cl = BCE_EPS
        elif u_cl > 1.0 - BCE_EPS:
            u_cl = 1.0 - BCE_EPS
        bce -= err[i] * log(u_cl) + (1.0 - err[i]) * log1p(-u_cl)
        diff = ui - u_base[i]
        reg += diff * diff

        if BCE_EPS < ui < 1.0 - BCE_EPS:
            dbce = -(err[i] / u_cl) + (1.0 - err[i]) / (1.0 - u_cl)
        else:
            dbce = 0.0
        du = (dbce + alpha * 2.0 * diff) / n
        for j in range(c):
            dz[i, j] = du * (-p[i, j] * (dz[i, j] + h) * invlogc)
    return u_out, bce / n, reg / n, dz_out
