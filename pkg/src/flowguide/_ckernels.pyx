# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``.

Each query is reduced sequentially over its keys, so results do not depend
on the query's position in the batch.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, floor, sqrt, INFINITY

cnp.import_array()

NAME = "cython"


def grouped_attention(q, k, v, passthrough, order, offsets, int heads, bint exclude_self):
    cdef const double[:, ::1] Q = np.ascontiguousarray(q, dtype=np.float64)
    cdef const double[:, ::1] Kf = np.ascontiguousarray(k, dtype=np.float64)
    cdef const double[:, ::1] V = np.ascontiguousarray(v, dtype=np.float64)
    cdef const double[:, ::1] P = np.ascontiguousarray(passthrough, dtype=np.float64)
    cdef const long long[::1] ORD = np.ascontiguousarray(order, dtype=np.int64)
    cdef const long long[::1] OFF = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef Py_ssize_t n = Q.shape[0], c = Q.shape[1]
    cdef Py_ssize_t d = c // heads
    cdef double scale = 1.0 / sqrt(<double>d)
    out_arr = np.zeros((n, c), dtype=np.float64)
    cdef double[:, ::1] O = out_arr

    cdef Py_ssize_t max_len = 0, g, ngroups = OFF.shape[0] - 1
    for g in range(ngroups):
        if OFF[g + 1] - OFF[g] > max_len:
            max_len = OFF[g + 1] - OFF[g]
    w_arr = np.empty(max(max_len, 1), dtype=np.float64)
    acc_arr = np.empty(max(d, 1), dtype=np.float64)
    cdef double[::1] w = w_arr
    cdef double[::1] acc = acc_arr

    cdef Py_ssize_t start, L, a, b, h, e, i, j, ref, off_h
    cdef double s, m, tot
    for g in range(ngroups):
        start = OFF[g]
        L = OFF[g + 1] - start
        for a in range(L):
            i = ORD[start + a]
            if exclude_self and L == 1:
                for e in range(c):
                    O[i, e] = P[i, e]
                continue
            ref = ORD[start + 1] if (exclude_self and a == 0) else ORD[start]
            for h in range(heads):
                off_h = h * d
                m = -INFINITY
                for b in range(L):
                    if exclude_self and b == a:
                        w[b] = -INFINITY
                        continue
                    j = ORD[start + b]
                    s = 0.0
                    for e in range(d):
                        s += Q[i, off_h + e] * Kf[j, off_h + e]
                    s *= scale
                    w[b] = s
                    if s > m:
                        m = s
                tot = 0.0
                for b in range(L):
                    if exclude_self and b == a:
                        w[b] = 0.0
                        continue
                    w[b] = exp(w[b] - m)
                    tot += w[b]
                for e in range(d):
                    acc[e] = 0.0
                for b in range(L):
                    if exclude_self and b == a:
                        continue
                    j = ORD[start + b]
                    s = w[b] / tot
                    for e in range(d):
                        acc[e] += s * (V[j, off_h + e] - V[ref, off_h + e])
                for e in range(d):
                    O[i, off_h + e] = V[ref, off_h + e] + acc[e]
    return out_arr


def bilinear_warp(image, fx, fy):
    cdef const double[:, :, ::1] I = np.ascontiguousarray(image, dtype=np.float64)
    cdef const double[:, ::1] FX = np.ascontiguousarray(fx, dtype=np.float64)
    cdef const double[:, ::1] FY = np.ascontiguousarray(fy, dtype=np.float64)
    cdef Py_ssize_t h = I.shape[0], w = I.shape[1], nc = I.shape[2]
    out_arr = np.zeros((h, w, nc), dtype=np.float64)
    mask_arr = np.zeros((h, w), dtype=np.bool_)
    cdef double[:, :, ::1] O = out_arr
    cdef cnp.npy_bool[:, ::1] M = mask_arr
    cdef Py_ssize_t y, x, ch, x0, y0, x1, y1
    cdef double sx, sy, ax, ay, top, bot
    for y in range(h):
        for x in range(w):
            sx = x + FX[y, x]
            sy = y + FY[y, x]
            if not (sx >= 0 and sx <= w - 1 and sy >= 0 and sy <= h - 1):
                continue
            M[y, x] = 1
            x0 = <Py_ssize_t>floor(sx)
            y0 = <Py_ssize_t>floor(sy)
            if x0 > w - 2:
                x0 = w - 2 if w >= 2 else 0
            if y0 > h - 2:
                y0 = h - 2 if h >= 2 else 0
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            ax = sx - x0
            ay = sy - y0
            for ch in range(nc):
                top = I[y0, x0, ch] * (1.0 - ax) + I[y0, x1, ch] * ax
                bot = I[y1, x0, ch] * (1.0 - ax) + I[y1, x1, ch] * ax
                O[y, x, ch] = top * (1.0 - ay) + bot * ay
    return out_arr, mask_arr
