# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; signatures match deblat._pykernels exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def splat_bilinear(xs, ys, ws, cnp.float64_t[:, ::1] out, double x0, double y0):
    cdef const cnp.float64_t[::1] fx = np.ascontiguousarray(xs, dtype=np.float64)
    cdef const cnp.float64_t[::1] fy = np.ascontiguousarray(ys, dtype=np.float64)
    cdef const cnp.float64_t[::1] w = np.ascontiguousarray(ws, dtype=np.float64)
    cdef Py_ssize_t n = fx.shape[0]
    cdef Py_ssize_t h = out.shape[0]
    cdef Py_ssize_t width = out.shape[1]
    cdef Py_ssize_t i, ix, iy
    cdef double gx, gy, ax, ay, wi, c, deposited = 0.0

    for i in range(n):
        gx = fx[i] - x0
        gy = fy[i] - y0
        ix = <Py_ssize_t>floor(gx)
        iy = <Py_ssize_t>floor(gy)
        ax = gx - ix
        ay = gy - iy
        wi = w[i]

        if 0 <= ix < width and 0 <= iy < h:
            c = wi * (1 - ax) * (1 - ay)
            out[iy, ix] += c
            deposited += c
        if 0 <= ix + 1 < width and 0 <= iy < h:
            c = wi * ax * (1 - ay)
            out[iy, ix + 1] += c
            deposited += c
        if 0 <= ix < width and 0 <= iy + 1 < h:
            c = wi * (1 - ax) * ay
            out[iy + 1, ix] += c
            deposited += c
        if 0 <= ix + 1 < width and 0 <= iy + 1 < h:
            c = wi * ax * ay
            out[iy + 1, ix + 1] += c
            deposited += c
    return deposited


def dykstra_project(fm, int max_iter=100, double tol=1e-10):
    x_arr = np.array(fm, dtype=np.float64, copy=True)
    cdef cnp.float64_t[:, ::1] x = x_arr
    cdef Py_ssize_t n = x.shape[0]
    incr_arr = np.zeros((n, 8, 4))
    cdef cnp.float64_t[:, :, ::1] incr = incr_arr
    cdef Py_ssize_t i, k, c, it
    cdef double y0, y1, y2, y3, p0, p1, p2, p3, mid, ch, max_change

    for it in range(max_iter):
        max_change = 0.0
        for k in range(8):
            for i in range(n):
                y0 = x[i, 0] + incr[i, k, 0]
                y1 = x[i, 1] + incr[i, k, 1]
                y2 = x[i, 2] + incr[i, k, 2]
                y3 = x[i, 3] + incr[i, k, 3]
                p0 = y0; p1 = y1; p2 = y2; p3 = y3
                if k < 3:
                    if k == 0 and p0 < 0: p0 = 0
                    elif k == 1 and p1 < 0: p1 = 0
                    elif k == 2 and p2 < 0: p2 = 0
                elif k < 6:
                    c = k - 3
                    if c == 0 and y0 > y3:
                        mid = 0.5 * (y0 + y3); p0 = mid; p3 = mid
                    elif c == 1 and y1 > y3:
                        mid = 0.5 * (y1 + y3); p1 = mid; p3 = mid
                    elif c == 2 and y2 > y3:
                        mid = 0.5 * (y2 + y3); p2 = mid; p3 = mid
                elif k == 6:
                    if p3 > 1: p3 = 1
                else:
                    if p3 < 0: p3 = 0
                incr[i, k, 0] = y0 - p0
                incr[i, k, 1] = y1 - p1
                incr[i, k, 2] = y2 - p2
                incr[i, k, 3] = y3 - p3
                ch = abs(p0 - x[i, 0])
                if abs(p1 - x[i, 1]) > ch: ch = abs(p1 - x[i, 1])
                if abs(p2 - x[i, 2]) > ch: ch = abs(p2 - x[i, 2])
                if abs(p3 - x[i, 3]) > ch: ch = abs(p3 - x[i, 3])
                if ch > max_change: max_change = ch
                x[i, 0] = p0; x[i, 1] = p1; x[i, 2] = p2; x[i, 3] = p3
        if max_change < tol:
            break
    return x_arr


def conv2d_direct(const cnp.float64_t[:, ::1] img, const cnp.float64_t[:, ::1] ker):
    cdef Py_ssize_t hi = img.shape[0], wi = img.shape[1]
    cdef Py_ssize_t hk = ker.shape[0], wk = ker.shape[1]
    out_arr = np.zeros((hi + hk - 1, wi + wk - 1))
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, y, x
    cdef double kv
    for i in range(hk):
        for j in range(wk):
            kv = ker[i, j]
            if kv == 0.0:
                continue
            for y in range(hi):
                for x in range(wi):
                    out[i + y, j + x] += kv * img[y, x]
    return out_arr


def closest_point_brute(px, py, sx, sy):
    cdef const cnp.float64_t[::1] qx = np.ascontiguousarray(px, dtype=np.float64)
    cdef const cnp.float64_t[::1] qy = np.ascontiguousarray(py, dtype=np.float64)
    cdef const cnp.float64_t[::1] cx = np.ascontiguousarray(sx, dtype=np.float64)
    cdef const cnp.float64_t[::1] cy = np.ascontiguousarray(sy, dtype=np.float64)
    cdef Py_ssize_t n = qx.shape[0], m = cx.shape[0]
    idx_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef Py_ssize_t i, j, best
    cdef double dx, dy, d2, best_d2
    for i in range(n):
        best = 0
        best_d2 = 1e300
        for j in range(m):
            dx = qx[i] - cx[j]
            dy = qy[i] - cy[j]
            d2 = dx * dx + dy * dy
            if d2 < best_d2:
                best_d2 = d2
                best = j
        idx[i] = best
    return idx_arr
