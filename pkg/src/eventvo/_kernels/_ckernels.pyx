# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the per-event frontend kernels (see _pykernels)."""

from libc.math cimport exp, INFINITY, isfinite

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef int HX[5]
cdef int HY[5]
HX[:] = [0, 1, -1, 0, 0]
HY[:] = [0, 0, 0, 1, -1]

DEF MAX_SIDE = 65


def neighbor_lookup(const int[:, ::1] table, Py_ssize_t x, Py_ssize_t y, Py_ssize_t r):
    cdef Py_ssize_t h = table.shape[0], w = table.shape[1]
    cdef Py_ssize_t y0 = y - r if y - r > 0 else 0
    cdef Py_ssize_t y1 = y + r + 1 if y + r + 1 < h else h
    cdef Py_ssize_t x0 = x - r if x - r > 0 else 0
    cdef Py_ssize_t x1 = x + r + 1 if x + r + 1 < w else w
    cdef Py_ssize_t i, j
    cdef long long best = -1, d2, best_d2 = 1LL << 62
    cdef int v
    for i in range(y0, y1):
        for j in range(x0, x1):
            v = table[i, j]
            if v >= 0:
                d2 = (i - y) * (i - y) + (j - x) * (j - x)
                if d2 < best_d2:
                    best_d2 = d2
                    best = v
    return best, (y1 - y0) * (x1 - x0)


cdef double _kth_largest(double* vals, int n, int k) nogil:
    # quickselect for the k-th largest (1-based) of n values, in place
    cdef int lo = 0, hi = n - 1, i, j, target = k - 1
    cdef double pivot, tmp
    while lo < hi:
        pivot = vals[(lo + hi) // 2]
        i = lo
        j = hi
        while i <= j:
            while vals[i] > pivot:
                i += 1
            while vals[j] < pivot:
                j -= 1
            if i <= j:
                tmp = vals[i]; vals[i] = vals[j]; vals[j] = tmp
                i += 1
                j -= 1
        if target <= j:
            hi = j
        elif target >= i:
            lo = i
        else:
            break
    return vals[target]


def harris_score(const double[:, ::1] plane, Py_ssize_t x, Py_ssize_t y, int w, int n_newest,
                 double sigma, double k):
    cdef Py_ssize_t h = plane.shape[0], wd = plane.shape[1]
    if x < w or y < w or x >= wd - w or y >= h - w:
        return -INFINITY
    cdef int s = 2 * w + 1
    if s > MAX_SIDE:
        raise ValueError("patch too large for the compiled kernel")
    cdef double vals[MAX_SIDE * MAX_SIDE]
    cdef unsigned char b[MAX_SIDE * MAX_SIDE]
    cdef int n = 0, i, j
    cdef double v, tau, mn = INFINITY
    for i in range(s):
        for j in range(s):
            v = plane[y - w + i, x - w + j]
            if isfinite(v):
                vals[n] = v
                n += 1
                if v < mn:
                    mn = v
    if n == 0:
        return 0.0
    if n > n_newest:
        tau = _kth_largest(vals, n, n_newest)
    else:
        tau = mn
    for i in range(s):
        for j in range(s):
            v = plane[y - w + i, x - w + j]
            b[i * s + j] = 1 if (isfinite(v) and v >= tau) else 0
    cdef double a = 0.0, c = 0.0, bxy = 0.0, gx, gy, g, inv2s2 = 1.0 / (2.0 * sigma * sigma)
    cdef int di, dj
    for i in range(1, s - 1):
        for j in range(1, s - 1):
            gx = (b[(i - 1) * s + j + 1] + 2 * b[i * s + j + 1] + b[(i + 1) * s + j + 1]
                  - b[(i - 1) * s + j - 1] - 2 * b[i * s + j - 1] - b[(i + 1) * s + j - 1])
            gy = (b[(i + 1) * s + j - 1] + 2 * b[(i + 1) * s + j] + b[(i + 1) * s + j + 1]
                  - b[(i - 1) * s + j - 1] - 2 * b[(i - 1) * s + j] - b[(i - 1) * s + j + 1])
            if gx == 0.0 and gy == 0.0:
                continue
            di = i - w
            dj = j - w
            g = exp(-(di * di + dj * dj) * inv2s2)
            a += g * gx * gx
            c += g * gy * gy
            bxy += g * gx * gy
    return a * c - bxy * bxy - k * (a + c) * (a + c)


def hypothesis_votes(const unsigned char[:, ::1] template, int w, int dx, int dy, cnp.int64_t[::1] out):
    cdef int s = 2 * w + 1, j, u, v
    for j in range(5):
        u = dx - HX[j] + w
        v = dy - HY[j] + w
        if 0 <= u < s and 0 <= v < s and template[v, u]:
            out[j] += 1


def hypothesis_scores(const unsigned char[:, ::1] template, int w, dx, dy):
    cdef cnp.int64_t[::1] ax = np.ascontiguousarray(dx, dtype=np.int64)
    cdef cnp.int64_t[::1] ay = np.ascontiguousarray(dy, dtype=np.int64)
    out = np.zeros(5, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    cdef Py_ssize_t i
    cdef int s = 2 * w + 1, j, u, v
    for i in range(ax.shape[0]):
        for j in range(5):
            u = <int>ax[i] - HX[j] + w
            v = <int>ay[i] - HY[j] + w
            if 0 <= u < s and 0 <= v < s and template[v, u]:
                o[j] += 1
    return out
