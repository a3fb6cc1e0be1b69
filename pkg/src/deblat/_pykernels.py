"""Pure numpy implementations of the hot kernels.

These mirror the compiled routines in ``_cykernels.pyx`` one to one; the
active backend is chosen in :mod:`deblat.kernels` at import time.
"""

import numpy as np


def splat_bilinear(xs, ys, ws, out, x0, y0):
    """Scatter weighted samples into ``out`` with bilinear footprints.

    Sample coordinates are frame coordinates; ``(x0, y0)`` is the frame
    position of ``out[0, 0]``. Samples whose footprint falls outside the
    raster are dropped. Returns the total mass actually deposited.
    """
    h, w = out.shape
    fx = np.asarray(xs, dtype=np.float64) - x0
    fy = np.asarray(ys, dtype=np.float64) - y0
    ws = np.asarray(ws, dtype=np.float64)

    ix = np.floor(fx).astype(np.int64)
    iy = np.floor(fy).astype(np.int64)
    ax = fx - ix
    ay = fy - iy

    deposited = 0.0
    for dx, dy, frac in (
        (0, 0, (1 - ax) * (1 - ay)),
        (1, 0, ax * (1 - ay)),
        (0, 1, (1 - ax) * ay),
        (1, 1, ax * ay),
    ):
        cx = ix + dx
        cy = iy + dy
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        contrib = ws * frac
        np.add.at(out, (cy[ok], cx[ok]), contrib[ok])
        deposited += float(contrib[ok].sum())
    return deposited


def dykstra_project(fm, max_iter=100, tol=1e-10):
    """Project rows of ``fm`` (= [F_r, F_g, F_b, M]) onto 0 <= F <= M <= 1.

    Dykstra's algorithm over the half-spaces F_c >= 0, F_c <= M, M <= 1
    and M >= 0; returns a new (n, 4) array.
    """
    x = np.array(fm, dtype=np.float64, copy=True)
    n = x.shape[0]
    # one correction buffer per half-space
    incr = np.zeros((8, n, 4))

    for _ in range(max_iter):
        max_change = 0.0
        for k in range(8):
            y = x + incr[k]
            p = y.copy()
            if k < 3:                      # F_c >= 0
                p[:, k] = np.maximum(y[:, k], 0.0)
            elif k < 6:                    # F_c <= M
                c = k - 3
                over = y[:, c] > y[:, 3]
                mid = 0.5 * (y[over, c] + y[over, 3])
                p[over, c] = mid
                p[over, 3] = mid
            elif k == 6:                   # M <= 1
                p[:, 3] = np.minimum(y[:, 3], 1.0)
            else:                          # M >= 0
                p[:, 3] = np.maximum(y[:, 3], 0.0)
            incr[k] = y - p
            max_change = max(max_change, float(np.max(np.abs(p - x), initial=0.0)))
            x = p
        if max_change < tol:
            break
    return x


def conv2d_direct(img, ker):
    """Full 2-D linear convolution by direct summation.

    Output shape is (hi + hk - 1, wi + wk - 1). This is the spatial path;
    the FFT path must agree with it to 1e-10.
    """
    hi, wi = img.shape
    hk, wk = ker.shape
    out = np.zeros((hi + hk - 1, wi + wk - 1))
    for i in range(hk):
        for j in range(wk):
            out[i:i + hi, j:j + wi] += ker[i, j] * img
    return out


def closest_point_brute(px, py, sx, sy):
    """Index of the nearest sample (sx, sy) for every point (px, py)."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    sx = np.asarray(sx, dtype=np.float64)
    sy = np.asarray(sy, dtype=np.float64)
    n = px.shape[0]
    idx = np.empty(n, dtype=np.int64)
    # chunked to keep the distance matrix small
    step = max(1, int(2e6 // max(sx.shape[0], 1)))
    for lo in range(0, n, step):
        hi = min(lo + step, n)
        d2 = (px[lo:hi, None] - sx[None, :]) ** 2 + (py[lo:hi, None] - sy[None, :]) ** 2
        idx[lo:hi] = np.argmin(d2, axis=1)
    return idx
