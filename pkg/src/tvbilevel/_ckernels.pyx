# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled stencil kernels; see ``_pykernels`` for the reference semantics."""
from libc.math cimport sqrt

import numpy as np

DEF FORWARD = 0
DEF BACKWARD = 1
DEF CENTERED = 2


cdef void _grad(const double[:, ::1] u, int scheme, double[:, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t m1 = u.shape[0], m2 = u.shape[1]
    cdef Py_ssize_t i, j
    for i in range(m1):
        for j in range(m2):
            out[i, j, 0] = 0.0
            out[i, j, 1] = 0.0
    if scheme == FORWARD:
        for i in range(m1):
            for j in range(m2 - 1):
                out[i, j, 0] = u[i, j + 1] - u[i, j]
        for i in range(m1 - 1):
            for j in range(m2):
                out[i, j, 1] = u[i + 1, j] - u[i, j]
    elif scheme == BACKWARD:
        for i in range(m1):
            for j in range(1, m2):
                out[i, j, 0] = u[i, j] - u[i, j - 1]
        for i in range(1, m1):
            for j in range(m2):
                out[i, j, 1] = u[i, j] - u[i - 1, j]
    else:
        for i in range(m1):
            for j in range(1, m2 - 1):
                out[i, j, 0] = 0.5 * (u[i, j + 1] - u[i, j - 1])
        for i in range(1, m1 - 1):
            for j in range(m2):
                out[i, j, 1] = 0.5 * (u[i + 1, j] - u[i - 1, j])


cdef void _grad_adjoint(const double[:, :, ::1] q, int scheme, double[:, ::1] out,
                        bint accumulate) noexcept nogil:
    cdef Py_ssize_t m1 = q.shape[0], m2 = q.shape[1]
    cdef Py_ssize_t i, j
    cdef double v
    if not accumulate:
        for i in range(m1):
            for j in range(m2):
                out[i, j] = 0.0
    if scheme == FORWARD:
        for i in range(m1):
            for j in range(m2 - 1):
                v = q[i, j, 0]
                out[i, j] -= v
                out[i, j + 1] += v
        for i in range(m1 - 1):
            for j in range(m2):
                v = q[i, j, 1]
                out[i, j] -= v
                out[i + 1, j] += v
    elif scheme == BACKWARD:
        for i in range(m1):
            for j in range(1, m2):
                v = q[i, j, 0]
                out[i, j] += v
                out[i, j - 1] -= v
        for i in range(1, m1):
            for j in range(m2):
                v = q[i, j, 1]
                out[i, j] += v
                out[i - 1, j] -= v
    else:
        for i in range(m1):
            for j in range(1, m2 - 1):
                v = 0.5 * q[i, j, 0]
                out[i, j + 1] += v
                out[i, j - 1] -= v
        for i in range(1, m1 - 1):
            for j in range(m2):
                v = 0.5 * q[i, j, 1]
                out[i + 1, j] += v
                out[i - 1, j] -= v


def grad(double[:, ::1] u, int scheme, double[:, :, ::1] out):
    if scheme < 0 or scheme > 2:
        raise ValueError(f"unknown scheme code {scheme}")
    with nogil:
        _grad(u, scheme, out)
    return np.asarray(out)


def grad_adjoint(double[:, :, ::1] q, int scheme, double[:, ::1] out):
    if scheme < 0 or scheme > 2:
        raise ValueError(f"unknown scheme code {scheme}")
    with nogil:
        _grad_adjoint(q, scheme, out, False)
    return np.asarray(out)


def project_balls(double[:, :, ::1] q, const double[:, ::1] radius):
    cdef Py_ssize_t i, j
    cdef double nrm, r
    with nogil:
        for i in range(q.shape[0]):
            for j in range(q.shape[1]):
                nrm = sqrt(q[i, j, 0] * q[i, j, 0] + q[i, j, 1] * q[i, j, 1])
                r = radius[i, j]
                if nrm > r:
                    q[i, j, 0] *= r / nrm
                    q[i, j, 1] *= r / nrm
    return np.asarray(q)


def pdhg_iterate(const double[:, ::1] f, const double[:, :, ::1] alpha,
                 const long[::1] schemes, double[:, ::1] u, double[:, ::1] ubar,
                 double[:, :, :, ::1] q, double tau, double sigma, long n_iter):
    cdef Py_ssize_t m1 = u.shape[0], m2 = u.shape[1]
    cdef Py_ssize_t n_terms = schemes.shape[0]
    cdef Py_ssize_t it, t, i, j
    cdef double nrm, r, qx, qy, un
    cdef double inv = 1.0 / (1.0 + tau)
    cdef double[:, :, ::1] tmp = np.empty((m1, m2, 2))
    cdef double[:, ::1] acc = np.empty((m1, m2))
    with nogil:
        for it in range(n_iter):
            for i in range(m1):
                for j in range(m2):
                    acc[i, j] = 0.0
            for t in range(n_terms):
                _grad(ubar, <int>schemes[t], tmp)
                for i in range(m1):
                    for j in range(m2):
                        qx = q[t, i, j, 0] + sigma * tmp[i, j, 0]
                        qy = q[t, i, j, 1] + sigma * tmp[i, j, 1]
                        nrm = sqrt(qx * qx + qy * qy)
                        r = alpha[t, i, j]
                        if nrm > r:
                            qx = qx * (r / nrm)
                            qy = qy * (r / nrm)
                        q[t, i, j, 0] = qx
                        q[t, i, j, 1] = qy
                _grad_adjoint(q[t], <int>schemes[t], acc, True)
            for i in range(m1):
                for j in range(m2):
                    un = (u[i, j] - tau * acc[i, j] + tau * f[i, j]) * inv
                    ubar[i, j] = 2.0 * un - u[i, j]
                    u[i, j] = un
