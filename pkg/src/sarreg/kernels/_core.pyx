# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled scalar-loop versions of the hot kernels.

Formulas and accumulation order mirror numpy_backend exactly so the two
backends agree to the last bit.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt

cnp.import_array()


def warp_bilinear(const cnp.float64_t[:, ::1] img, const cnp.float64_t[:, :, ::1] field):
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t r, c, y0, x0, y1, x1
    cdef double ys, xs, u, v, hm1 = h - 1.0, wm1 = w - 1.0
    for r in range(h):
        for c in range(w):
            ys = r + field[r, c, 0]
            if ys < 0.0:
                ys = 0.0
            elif ys > hm1:
                ys = hm1
            xs = c + field[r, c, 1]
            if xs < 0.0:
                xs = 0.0
            elif xs > wm1:
                xs = wm1
            y0 = <Py_ssize_t>floor(ys)
            x0 = <Py_ssize_t>floor(xs)
            u = ys - y0
            v = xs - x0
            y1 = y0 + 1
            if y1 > h - 1:
                y1 = h - 1
            x1 = x0 + 1
            if x1 > w - 1:
                x1 = w - 1
            out[r, c] = ((1.0 - u) * (1.0 - v) * img[y0, x0]
                         + (1.0 - u) * v * img[y0, x1]
                         + u * (1.0 - v) * img[y1, x0]
                         + u * v * img[y1, x1])
    return out_arr


def warp_nearest(const cnp.float64_t[:, ::1] img, const cnp.float64_t[:, :, ::1] field):
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t r, c, yi, xi
    cdef double ys, xs, hm1 = h - 1.0, wm1 = w - 1.0
    for r in range(h):
        for c in range(w):
            ys = r + field[r, c, 0]
            if ys < 0.0:
                ys = 0.0
            elif ys > hm1:
                ys = hm1
            xs = c + field[r, c, 1]
            if xs < 0.0:
                xs = 0.0
            elif xs > wm1:
                xs = wm1
            yi = <Py_ssize_t>floor(ys + 0.5)
            if yi > h - 1:
                yi = h - 1
            xi = <Py_ssize_t>floor(xs + 0.5)
            if xi > w - 1:
                xi = w - 1
            out[r, c] = img[yi, xi]
    return out_arr


def bspline_dense(const cnp.float64_t[:, :, ::1] coeffs, int spacing, int h, int w):
    out_arr = np.zeros((h, w, 2), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t r, c, l, m
    cdef Py_ssize_t[::1] iy = np.empty(h, dtype=np.intp)
    cdef Py_ssize_t[::1] ix = np.empty(w, dtype=np.intp)
    wy_arr = np.empty((h, 4), dtype=np.float64)
    wx_arr = np.empty((w, 4), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] wy = wy_arr
    cdef cnp.float64_t[:, ::1] wx = wx_arr
    cdef double t, u, u2, u3, wv
    for r in range(h):
        t = r / <double>spacing
        iy[r] = <Py_ssize_t>floor(t)
        u = t - iy[r]
        u2 = u * u
        u3 = u2 * u
        wy[r, 0] = (1.0 - u) * (1.0 - u) * (1.0 - u) / 6.0
        wy[r, 1] = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0
        wy[r, 2] = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0
        wy[r, 3] = u3 / 6.0
    for c in range(w):
        t = c / <double>spacing
        ix[c] = <Py_ssize_t>floor(t)
        u = t - ix[c]
        u2 = u * u
        u3 = u2 * u
        wx[c, 0] = (1.0 - u) * (1.0 - u) * (1.0 - u) / 6.0
        wx[c, 1] = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0
        wx[c, 2] = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0
        wx[c, 3] = u3 / 6.0
    for l in range(4):
        for m in range(4):
            for r in range(h):
                for c in range(w):
                    wv = wy[r, l] * wx[c, m]
                    out[r, c, 0] += wv * coeffs[iy[r] + l, ix[c] + m, 0]
                    out[r, c, 1] += wv * coeffs[iy[r] + l, ix[c] + m, 1]
    return out_arr


def nearest_distances(const cnp.float64_t[:, ::1] src, const cnp.float64_t[:, ::1] dst):
    cdef Py_ssize_t ns = src.shape[0]
    cdef Py_ssize_t nd = dst.shape[0]
    out_arr = np.empty(ns, dtype=np.float64)
    cdef cnp.float64_t[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double best, dy, dx, d2
    for i in range(ns):
        best = -1.0
        for j in range(nd):
            dy = src[i, 0] - dst[j, 0]
            dx = src[i, 1] - dst[j, 1]
            d2 = dy * dy + dx * dx
            if best < 0.0 or d2 < best:
                best = d2
        out[i] = sqrt(best)
    return out_arr
