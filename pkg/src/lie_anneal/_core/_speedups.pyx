# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled batched stepping kernels (hot inner loop of the SDE drivers).

Semantics mirror lie_anneal._core._fallback exactly; see that module for
the conventions.  All functions mutate their first argument in place and
release the GIL, so path chunks can be stepped from worker threads.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, floor, fmod, sin, sqrt

cnp.import_array()

cdef double TWO_PI = 6.283185307179586476925286766559


def torus_step(double[:, ::1] theta, double[:, ::1] v, bint wrap=True):
    cdef Py_ssize_t m = theta.shape[0], d = theta.shape[1]
    cdef Py_ssize_t i, j
    cdef double t
    with nogil:
        for i in range(m):
            for j in range(d):
                t = theta[i, j] + v[i, j]
                if wrap:
                    t = fmod(t, TWO_PI)
                    if t < 0.0:
                        t += TWO_PI
                theta[i, j] = t


def heis_step(double[:, ::1] g, double[:, ::1] v):
    cdef Py_ssize_t m = g.shape[0]
    cdef Py_ssize_t i
    cdef double x, y
    with nogil:
        for i in range(m):
            x = g[i, 0]
            y = g[i, 1]
            g[i, 2] += v[i, 2] + 0.5 * (x * v[i, 1] - y * v[i, 0])
            g[i, 0] = x + v[i, 0]
            g[i, 1] = y + v[i, 1]


def heis_reduce(double[:, ::1] g):
    cdef Py_ssize_t m = g.shape[0]
    cdef Py_ssize_t i
    cdef double x, y, z, a, b
    with nogil:
        for i in range(m):
            x = g[i, 0]
            y = g[i, 1]
            z = g[i, 2]
            a = -floor(x)
            b = -floor(y)
            z += 0.5 * a * b + 0.5 * (a * y - b * x)
            x += a
            y += b
            z -= floor(z)
            g[i, 0] = x
            g[i, 1] = y
            g[i, 2] = z


def su2_exp(double[:, ::1] v):
    cdef Py_ssize_t m = v.shape[0]
    out_arr = np.empty((m, 4))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i
    cdef double a, b, c, theta, k
    with nogil:
        for i in range(m):
            a = v[i, 0]
            b = v[i, 1]
            c = v[i, 2]
            theta = sqrt(a * a + b * b + c * c)
            if theta < 1e-8:
                k = 1.0 - theta * theta / 6.0
            else:
                k = sin(theta) / theta
            out[i, 0] = cos(theta)
            out[i, 1] = a * k
            out[i, 2] = b * k
            out[i, 3] = c * k
    return out_arr


def su2_mul(q_in, r_in):
    q_arr = np.ascontiguousarray(np.broadcast_to(q_in, np.broadcast(q_in, r_in).shape))
    r_arr = np.ascontiguousarray(np.broadcast_to(r_in, q_arr.shape))
    flat_q = q_arr.reshape(-1, 4)
    flat_r = r_arr.reshape(-1, 4)
    out_arr = np.empty_like(flat_q)
    cdef double[:, ::1] q = flat_q
    cdef double[:, ::1] r = flat_r
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t m = q.shape[0]
    cdef Py_ssize_t i
    cdef double w1, x1, y1, z1, w2, x2, y2, z2
    with nogil:
        for i in range(m):
            w1 = q[i, 0]; x1 = q[i, 1]; y1 = q[i, 2]; z1 = q[i, 3]
            w2 = r[i, 0]; x2 = r[i, 1]; y2 = r[i, 2]; z2 = r[i, 3]
            out[i, 0] = w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2
            out[i, 1] = w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2
            out[i, 2] = w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2
            out[i, 3] = w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2
    return out_arr.reshape(q_arr.shape)


def su2_step(double[:, ::1] q, double[:, ::1] v):
    cdef Py_ssize_t m = q.shape[0]
    cdef Py_ssize_t i
    cdef double a, b, c, theta, k, ew, ex, ey, ez
    cdef double w1, x1, y1, z1, w, x, y, z, nrm
    with nogil:
        for i in range(m):
            a = v[i, 0]
            b = v[i, 1]
            c = v[i, 2]
            theta = sqrt(a * a + b * b + c * c)
            if theta < 1e-8:
                k = 1.0 - theta * theta / 6.0
            else:
                k = sin(theta) / theta
            ew = cos(theta); ex = a * k; ey = b * k; ez = c * k
            w1 = q[i, 0]; x1 = q[i, 1]; y1 = q[i, 2]; z1 = q[i, 3]
            w = w1 * ew - x1 * ex - y1 * ey - z1 * ez
            x = w1 * ex + x1 * ew + y1 * ez - z1 * ey
            y = w1 * ey - x1 * ez + y1 * ew + z1 * ex
            z = w1 * ez + x1 * ey - y1 * ex + z1 * ew
            nrm = 1.0 / sqrt(w * w + x * x + y * y + z * z)
            q[i, 0] = w * nrm
            q[i, 1] = x * nrm
            q[i, 2] = y * nrm
            q[i, 3] = z * nrm
