# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY

cnp.import_array()


def raycast_rectangles(const double[::1] origin,
                       const double[:, ::1] dirs,
                       const double[:, ::1] rect_o,
                       const double[:, ::1] rect_u,
                       const double[:, ::1] rect_v):
    cdef Py_ssize_t n = dirs.shape[0]
    cdef Py_ssize_t s_count = rect_o.shape[0]
    t_out = np.full(n, np.inf)
    idx_out = np.full(n, -1, dtype=np.int64)
    a_out = np.full(n, np.nan)
    b_out = np.full(n, np.nan)
    cdef double[::1] t_v = t_out
    cdef long long[::1] i_v = idx_out
    cdef double[::1] a_v = a_out
    cdef double[::1] b_v = b_out

    # per-surface constants
    normals = np.cross(np.asarray(rect_u), np.asarray(rect_v))
    uu = np.einsum("ij,ij->i", np.asarray(rect_u), np.asarray(rect_u))
    vv = np.einsum("ij,ij->i", np.asarray(rect_v), np.asarray(rect_v))
    offs = np.einsum("ij,ij->i", normals, np.asarray(rect_o) - np.asarray(origin))
    cdef double[:, ::1] nrm = np.ascontiguousarray(normals)
    cdef double[::1] uu_v = uu
    cdef double[::1] vv_v = vv
    cdef double[::1] off_v = offs

    cdef Py_ssize_t i, s
    cdef double dx, dy, dz, den, t, px, py, pz, a, b, best
    for i in range(n):
        dx = dirs[i, 0]
        dy = dirs[i, 1]
        dz = dirs[i, 2]
        best = INFINITY
        for s in range(s_count):
            den = nrm[s, 0] * dx + nrm[s, 1] * dy + nrm[s, 2] * dz
            if fabs(den) < 1e-12:
                continue
            t = off_v[s] / den
            if t <= 1e-9 or t >= best:
                continue
            px = origin[0] + t * dx - rect_o[s, 0]
            py = origin[1] + t * dy - rect_o[s, 1]
            pz = origin[2] + t * dz - rect_o[s, 2]
            a = (px * rect_u[s, 0] + py * rect_u[s, 1] + pz * rect_u[s, 2]) / uu_v[s]
            if a < 0.0 or a > 1.0:
                continue
            b = (px * rect_v[s, 0] + py * rect_v[s, 1] + pz * rect_v[s, 2]) / vv_v[s]
            if b < 0.0 or b > 1.0:
                continue
            best = t
            t_v[i] = t
            i_v[i] = s
            a_v[i] = a
            b_v[i] = b
    return t_out, idx_out, a_out, b_out


def nearest_sqdist(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    d_out = np.empty(n)
    j_out = np.empty(n, dtype=np.int64)
    cdef double[::1] d_v = d_out
    cdef long long[::1] j_v = j_out
    cdef Py_ssize_t i, j, jb
    cdef double ax, ay, az, dx, dy, dz, d, best
    for i in range(n):
        ax = a[i, 0]
        ay = a[i, 1]
        az = a[i, 2]
        best = INFINITY
        jb = -1
        for j in range(m):
            dx = b[j, 0] - ax
            dy = b[j, 1] - ay
            dz = b[j, 2] - az
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                jb = j
        d_v[i] = best
        j_v[i] = jb
    return d_out, j_out


def count_inliers(const double[:, :, ::1] rotations,
                  const double[:, ::1] translations,
                  const double[::1] k4,
                  const double[:, ::1] points,
                  const double[:, ::1] pixels,
                  double threshold,
                  double min_depth):
    cdef Py_ssize_t h_count = rotations.shape[0]
    cdef Py_ssize_t n = points.shape[0]
    counts = np.zeros(h_count, dtype=np.int64)
    cdef long long[::1] c_v = counts
    cdef double thr2 = threshold * threshold
    cdef Py_ssize_t h, i
    cdef double x, y, z, u, v, du, dv
    cdef long long c
    for h in range(h_count):
        c = 0
        for i in range(n):
            z = (rotations[h, 2, 0] * points[i, 0] + rotations[h, 2, 1] * points[i, 1]
                 + rotations[h, 2, 2] * points[i, 2] + translations[h, 2])
            if z <= min_depth:
                continue
            x = (rotations[h, 0, 0] * points[i, 0] + rotations[h, 0, 1] * points[i, 1]
                 + rotations[h, 0, 2] * points[i, 2] + translations[h, 0])
            y = (rotations[h, 1, 0] * points[i, 0] + rotations[h, 1, 1] * points[i, 1]
                 + rotations[h, 1, 2] * points[i, 2] + translations[h, 1])
            u = k4[0] * x / z + k4[2]
            v = k4[1] * y / z + k4[3]
            du = u - pixels[i, 0]
            dv = v - pixels[i, 1]
            if du * du + dv * dv < thr2:
                c += 1
        c_v[h] = c
    return counts
