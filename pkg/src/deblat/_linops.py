"""Array-level linear operators: convolution paths, padding, gradients.

Everything here works on raw float64 ndarrays. The public image API wraps
these in :mod:`deblat.imaging`; the deblatting solver uses them directly.
All forward/adjoint pairs are exact transposes of each other, which the
test suite checks with random inner products.
"""

import numpy as np
import scipy.fft

from deblat import kernels

# kernels with at least this many taps go through the FFT path
FFT_KERNEL_AREA = 121


def conv_full_fft(img, ker):
    """Full linear convolution via real FFTs, same result as conv2d_direct."""
    hi, wi = img.shape
    hk, wk = ker.shape
    sh = scipy.fft.next_fast_len(hi + hk - 1)
    sw = scipy.fft.next_fast_len(wi + wk - 1)
    out = scipy.fft.irfft2(
        scipy.fft.rfft2(img, s=(sh, sw)) * scipy.fft.rfft2(ker, s=(sh, sw)),
        s=(sh, sw),
    )
    return out[: hi + hk - 1, : wi + wk - 1]


def conv_full(img, ker, method="auto"):
    img = np.ascontiguousarray(img, dtype=np.float64)
    ker = np.ascontiguousarray(ker, dtype=np.float64)
    if method == "auto":
        method = "fft" if ker.size >= FFT_KERNEL_AREA else "spatial"
    if method == "fft":
        return conv_full_fft(img, ker)
    if method == "spatial":
        return kernels.conv2d_direct(img, ker)
    raise ValueError(f"unknown convolution method {method!r}")


def _embed_slice(out_shape, src_shape, oy, ox):
    """Overlap slices for reading src at offset (oy, ox) into an out grid."""
    h, w = out_shape
    sh, sw = src_shape
    y0 = max(0, -oy)
    x0 = max(0, -ox)
    y1 = min(h, sh - oy)
    x1 = min(w, sw - ox)
    return (slice(y0, max(y0, y1)), slice(x0, max(x0, x1)),
            slice(y0 + oy, max(y0 + oy, y1 + oy)), slice(x0 + ox, max(x0 + ox, x1 + ox)))


def conv_offset_zero(img, ker, oy, ox, method="auto"):
    """Same-size convolution, kernel tap (i, j) at offset (oy + i, ox + j).

    out[y, x] = sum_ij ker[i, j] * img[y - oy - i, x - ox - j], zero outside.
    """
    full = conv_full(img, ker, method)
    out = np.zeros_like(img)
    dy, dx, sy, sx = _embed_slice(img.shape, full.shape, -oy, -ox)
    out[dy, dx] = full[sy, sx]
    return out


def corr_offset_zero(img, ker, oy, ox, method="auto"):
    """Exact adjoint of conv_offset_zero with the same kernel and offset."""
    hk, wk = ker.shape
    full = conv_full(img, ker[::-1, ::-1], method)
    out = np.zeros_like(img)
    dy, dx, sy, sx = _embed_slice(img.shape, full.shape, oy + hk - 1, ox + wk - 1)
    out[dy, dx] = full[sy, sx]
    return out


def _replicate_pads(shape, ker_shape, oy, ox):
    h, w = shape
    hk, wk = ker_shape
    pt = max(0, oy + hk - 1)
    pb = max(0, -oy)
    pl = max(0, ox + wk - 1)
    pr = max(0, -ox)
    return pt, pb, pl, pr


def edge_pad_adjoint(a, pt, pb, pl, pr):
    """Transpose of np.pad(..., mode='edge'): fold pad strips onto the rim."""
    h = a.shape[0] - pt - pb
    w = a.shape[1] - pl - pr
    rows = a[pt:pt + h, :].copy()
    if pt:
        rows[0, :] += a[:pt, :].sum(axis=0)
    if pb:
        rows[-1, :] += a[pt + h:, :].sum(axis=0)
    out = rows[:, pl:pl + w].copy()
    if pl:
        out[:, 0] += rows[:, :pl].sum(axis=1)
    if pr:
        out[:, -1] += rows[:, pl + w:].sum(axis=1)
    return out


def conv_offset_replicate(img, ker, oy, ox, method="auto"):
    """Same-size convolution with replicate (edge) boundary handling."""
    pt, pb, pl, pr = _replicate_pads(img.shape, ker.shape, oy, ox)
    padded = np.pad(img, ((pt, pb), (pl, pr)), mode="edge")
    full = conv_full(padded, ker, method)
    # out[y, x] = full[y + pt - oy, x + pl - ox]; always in range by pad choice
    y0 = pt - oy
    x0 = pl - ox
    return full[y0:y0 + img.shape[0], x0:x0 + img.shape[1]].copy()


def corr_offset_replicate(img, ker, oy, ox, method="auto"):
    """Exact adjoint of conv_offset_replicate."""
    hk, wk = ker.shape
    pt, pb, pl, pr = _replicate_pads(img.shape, ker.shape, oy, ox)
    ph = img.shape[0] + pt + pb
    pw = img.shape[1] + pl + pr
    # adjoint of the slice: embed into the full-conv canvas
    canvas = np.zeros((ph + hk - 1, pw + wk - 1))
    y0 = pt - oy
    x0 = pl - ox
    canvas[y0:y0 + img.shape[0], x0:x0 + img.shape[1]] = img
    # adjoint of conv_full(padded, ker) is valid-mode correlation
    full = conv_full(canvas, ker[::-1, ::-1], method)
    padded_grad = full[hk - 1:hk - 1 + ph, wk - 1:wk - 1 + pw]
    return edge_pad_adjoint(padded_grad, pt, pb, pl, pr)


def grad_x(a):
    """Forward difference along x, replicate boundary (last column zero)."""
    g = np.zeros_like(a)
    g[:, :-1] = a[:, 1:] - a[:, :-1]
    return g


def grad_y(a):
    g = np.zeros_like(a)
    g[:-1, :] = a[1:, :] - a[:-1, :]
    return g


def grad_x_adjoint(p):
    out = np.zeros_like(p)
    out[:, 0] = -p[:, 0]
    out[:, 1:-1] = p[:, :-2] - p[:, 1:-1]
    out[:, -1] = p[:, -2]
    return out


def grad_y_adjoint(p):
    out = np.zeros_like(p)
    out[0, :] = -p[0, :]
    out[1:-1, :] = p[:-2, :] - p[1:-1, :]
    out[-1, :] = p[-2, :]
    return out


def grad_normal(a):
    """grad^T grad applied to a (the TV normal operator block)."""
    return grad_x_adjoint(grad_x(a)) + grad_y_adjoint(grad_y(a))


class FourierGrid:
    """Shared rfft2 plan for repeated convolutions on one working window.

    Kernels are transformed once; wraparound never pollutes results as long
    as the physical support of every product stays inside the window, which
    the caller guarantees by construction of the window margins.
    """

    def __init__(self, shape):
        self.shape = shape
        self.fft_shape = (scipy.fft.next_fast_len(shape[0]),
                          scipy.fft.next_fast_len(shape[1]))

    def fwd(self, a):
        return scipy.fft.rfft2(a, s=self.fft_shape)

    def inv(self, A):
        return scipy.fft.irfft2(A, s=self.fft_shape)[: self.shape[0], : self.shape[1]]

    def inv_raw(self, A):
        """Inverse transform over the whole padded grid (no crop)."""
        return scipy.fft.irfft2(A, s=self.fft_shape)

    def kernel_hat(self, ker, oy, ox):
        """Transform of a kernel whose tap (i, j) sits at grid point (oy+i, ox+j)."""
        canvas = np.zeros(self.fft_shape)
        hk, wk = ker.shape
        ys = (oy + np.arange(hk)) % self.fft_shape[0]
        xs = (ox + np.arange(wk)) % self.fft_shape[1]
        canvas[np.ix_(ys, xs)] = ker
        return scipy.fft.rfft2(canvas)

    def conv(self, a_hat, k_hat):
        return self.inv(a_hat * k_hat)

    def corr(self, a_hat, k_hat):
        return self.inv(a_hat * np.conj(k_hat))


def cg_solve(apply_op, rhs, x0=None, tol=1e-6, max_iter=200, precond=None):
    """Matrix-free preconditioned conjugate gradients for SPD operators.

    Stops when ||r|| <= tol * ||rhs||. Returns (x, n_iters, converged).
    """
    x = np.zeros_like(rhs) if x0 is None else x0.copy()
    r = rhs - apply_op(x)
    b_norm = float(np.linalg.norm(rhs))
    if b_norm == 0.0:
        return np.zeros_like(rhs), 0, True
    z = precond(r) if precond else r
    p = z.copy()
    rz = float(np.vdot(r, z).real)
    for it in range(max_iter):
        if np.linalg.norm(r) <= tol * b_norm:
            return x, it, True
        ap = apply_op(p)
        denom = float(np.vdot(p, ap).real)
        if denom <= 0:
            break
        alpha = rz / denom
        x += alpha * p
        r -= alpha * ap
        z = precond(r) if precond else r
        rz_new = float(np.vdot(r, z).real)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iter, bool(np.linalg.norm(r) <= tol * b_norm)
