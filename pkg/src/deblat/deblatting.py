"""Joint blind estimation of a blur kernel and an object appearance/mask.

The observed frame is modeled as ``I = H*F + (1 - H*M) B``: an object
with appearance ``F`` and transparency mask ``M`` swept along a blur
kernel ``H`` over a known background ``B``. Estimation alternates two
convex subproblems:

* the kernel step: nonnegative, L1-sparse least squares for ``H`` on a
  search region, and
* the appearance step: total-variation-regularized least squares for
  ``(F, M)`` constrained to ``0 <= F_c <= M <= 1`` per pixel.

Both run ADMM; the inner least-squares solves use conjugate gradients
with all convolutions done on a zero-padded FFT grid over a working
window cut around the search region. The window margin equals the model
support side, which keeps every physical support inside the grid so the
circular FFT products equal the true linear convolutions everywhere we
read them.
"""

from dataclasses import dataclass

import numpy as np

from deblat import _linops, kernels
from deblat.formation import ObjectModel, ball_model
from deblat.imaging import Psf, RasterImage, Region


class DeblatError(ValueError):
    pass


@dataclass(frozen=True)
class DeblatParams:
    alpha_h: float = 1e-3        # L1 weight on the kernel
    alpha_f: float = 1e-2        # TV weight on the appearance
    lambda_tmpl: float = 1e-1    # template agreement weight
    rho: float = 1e-1            # ADMM penalty, kernel split
    rho1: float = 1e-1           # ADMM penalty, appearance gradient split
    rho2: float = 1e-1           # ADMM penalty, constraint split
    max_outer_iters: int = 10
    max_inner_iters: int = 50
    rel_tol: float = 1e-3
    cg_tol: float = 1e-6
    cg_max_iters: int = 200

    def __post_init__(self):
        if min(self.alpha_h, self.alpha_f, self.lambda_tmpl) < 0:
            raise DeblatError("regularization weights must be >= 0")
        if min(self.rho, self.rho1, self.rho2) <= 0:
            raise DeblatError("ADMM penalties must be > 0")
        if self.rel_tol <= 0 or self.cg_tol <= 0:
            raise DeblatError("tolerances must be > 0")


@dataclass
class DeblatResult:
    psf: Psf
    model: ObjectModel
    objective: list
    converged: bool
    n_outer: int
    window: Region


def _replicate_extract(data, region):
    ys = np.clip(np.arange(region.y0, region.y1), 0, data.shape[0] - 1)
    xs = np.clip(np.arange(region.x0, region.x1), 0, data.shape[1] - 1)
    return data[np.ix_(ys, xs)]


class _Workspace:
    """Geometry + FFT plan shared by both subproblems.

    The working window is the search region dilated by the model
    half-side (the farthest any model pixel reaches around a kernel tap,
    which the domain mask keeps inside the region); the FFT grid is a
    full model side larger so that kernel-support reads of correlations
    never alias.
    """

    def __init__(self, frame, background, region, side):
        if side % 2 != 1 or side < 3:
            raise DeblatError("model side must be odd and >= 3")
        if (frame.height, frame.width) != (background.height, background.width):
            raise DeblatError("frame and background size mismatch")
        self.side = side
        self.center = (side - 1) // 2
        self.domain = region
        self.window = region.dilated((side + 1) // 2)
        wh, ww = self.window.height, self.window.width
        self.wshape = (wh, ww)
        frame = frame.as_rgb()
        background = background.as_rgb()
        self.iw = np.stack([_replicate_extract(frame.plane(c), self.window)
                            for c in range(3)], axis=2)
        self.bw = np.stack([_replicate_extract(background.plane(c), self.window)
                            for c in range(3)], axis=2)
        self.dmask = np.zeros((wh, ww), dtype=bool)
        y0 = region.y0 - self.window.y0
        x0 = region.x0 - self.window.x0
        self.dmask[y0:y0 + region.height, x0:x0 + region.width] = True
        if region.mask is not None:
            self.dmask[y0:y0 + region.height, x0:x0 + region.width] = region.mask
        self.fft = _linops.FourierGrid((wh + side, ww + side))

    # -- transforms ----------------------------------------------------
    def fwd_win(self, a):
        return self.fft.fwd(a)

    def fwd_sup(self, a):
        c = self.center
        return self.fft.kernel_hat(a, -c, -c)

    def read_win(self, prod):
        return self.fft.inv(prod)[: self.wshape[0], : self.wshape[1]]

    def read_sup(self, prod):
        full = self.fft.inv_raw(prod)
        c = self.center
        idx_y = (np.arange(self.side) - c) % full.shape[0]
        idx_x = (np.arange(self.side) - c) % full.shape[1]
        return full[np.ix_(idx_y, idx_x)]

    def embed_kernel(self, psf):
        """Place PSF weights (frame coordinates) onto the window grid."""
        h = np.zeros(self.wshape)
        oy = psf.offset[1] - self.window.y0
        ox = psf.offset[0] - self.window.x0
        if oy < 0 or ox < 0 or oy + psf.height > self.wshape[0] \
                or ox + psf.width > self.wshape[1]:
            raise DeblatError("kernel support outside the working window")
        h[oy:oy + psf.height, ox:ox + psf.width] = psf.weights
        return h


# ---------------------------------------------------------------- H step

class HStepOperator:
    """Normal operator (A^T A + rho I) of the kernel subproblem.

    ``A`` maps a window-sized kernel ``h`` supported on the search
    region to per-channel images ``h*F_c - B_c (h*M)``. The CG
    preconditioner freezes each background channel at its window mean,
    which turns the normal operator into a single convolution and makes
    it exactly invertible on the shared spectral grid.
    """

    def __init__(self, ws, F, M, rho):
        self.ws = ws
        self.rho = rho
        self.fhat = [ws.fwd_sup(np.ascontiguousarray(F[:, :, c])) for c in range(3)]
        self.mhat = ws.fwd_sup(M)
        spec = np.zeros(self.mhat.shape)
        for c in range(3):
            bbar = float(ws.bw[:, :, c].mean())
            spec += np.abs(self.fhat[c] - bbar * self.mhat) ** 2
        self.spec = spec + rho

    def forward(self, h):
        ws = self.ws
        hhat = ws.fwd_win(h)
        hm = ws.read_win(hhat * self.mhat)
        out = np.empty(ws.wshape + (3,))
        for c in range(3):
            out[:, :, c] = ws.read_win(hhat * self.fhat[c]) - ws.bw[:, :, c] * hm
        return out

    def adjoint(self, r):
        ws = self.ws
        acc_f = None
        acc_b = None
        for c in range(3):
            rc_hat = ws.fwd_win(r[:, :, c])
            bh = ws.fwd_win(ws.bw[:, :, c] * r[:, :, c])
            term = rc_hat * np.conj(self.fhat[c])
            acc_f = term if acc_f is None else acc_f + term
            acc_b = bh if acc_b is None else acc_b + bh
        return ws.read_win(acc_f) - ws.read_win(acc_b * np.conj(self.mhat))

    def normal(self, h):
        return self.ws.dmask * self.adjoint(self.forward(h)) + self.rho * h

    def precond(self, r):
        ws = self.ws
        return ws.dmask * ws.read_win(ws.fwd_win(r) / self.spec)


def _solve_h(ws, F, M, params, state=None):
    """ADMM for the kernel given a fixed model; returns (kernel, state)."""
    op = HStepOperator(ws, F, M, params.rho)
    b = ws.iw - ws.bw
    atb = ws.dmask * op.adjoint(b)
    if state is None:
        h = np.zeros(ws.wshape)
        z = np.zeros(ws.wshape)
        u = np.zeros(ws.wshape)
    else:
        h, z, u = state
    thresh = params.alpha_h / params.rho
    for _ in range(params.max_inner_iters):
        rhs = atb + params.rho * (z - u)
        h_new, _, _ = _linops.cg_solve(op.normal, rhs, x0=h, tol=params.cg_tol,
                                       max_iter=params.cg_max_iters,
                                       precond=op.precond)
        z_new = np.maximum(h_new + u - thresh, 0.0) * ws.dmask
        h_shift = float(np.linalg.norm(h_new - h))
        z_shift = float(np.linalg.norm(z_new - z))
        h, z = h_new, z_new
        u = u + h - z
        # the consensus gap ||h - z|| closes at the (slow) dual rate while
        # the returned iterate z stalls long before; stop on progress
        scale = max(float(np.linalg.norm(h)), 1e-12)
        if max(h_shift, z_shift) <= params.rel_tol * scale:
            break
    return z, (h, z, u)


# --------------------------------------------------------------- FM step

class FmStepOperator:
    """Normal operator of the appearance subproblem on the model support.

    The unknown is the stacked field ``X = (F_r, F_g, F_b, M)`` of shape
    (side, side, 4). The operator applies ``A^T A`` through the shared
    FFT grid plus the gradient, template-agreement and splitting terms;
    ``blocks()`` returns the exact per-pixel 4x4 diagonal blocks used as
    a preconditioner. The template term ``lam/2 ||F - M Fhat||^2``
    couples each appearance channel to the mask through the fixed
    template ``Fhat``; it pins only the ratio of appearance to mask, so
    when the template also prescribes a mask the quadratic
    ``lam/2 ||M - Mhat||^2`` anchors the intensity split outright
    (otherwise a dimmer model under a heavier kernel composites to the
    same frame and the smoothness term bankrolls the dimming).
    """

    def __init__(self, ws, h, rho1, rho2, lam, template=None,
                 mask_template=None):
        self.ws = ws
        self.rho1 = rho1
        self.rho2 = rho2
        self.lam = lam if template is not None else 0.0
        self.template = template
        self.mask_template = mask_template if template is not None else None
        self.hhat = ws.fwd_win(h)
        self.hnorm2 = float(np.sum(h * h))
        h2_hat = ws.fwd_win(h * h)
        self.cross = np.empty((ws.side, ws.side, 3))
        mm = np.zeros((ws.side, ws.side))
        for c in range(3):
            bc_hat = ws.fwd_win(ws.bw[:, :, c])
            b2_hat = ws.fwd_win(ws.bw[:, :, c] ** 2)
            self.cross[:, :, c] = -ws.read_sup(bc_hat * np.conj(h2_hat))
            mm += ws.read_sup(b2_hat * np.conj(h2_hat))
        self.mm = mm

    def forward(self, x):
        ws = self.ws
        mh = ws.fwd_sup(np.ascontiguousarray(x[:, :, 3]))
        hm = ws.read_win(self.hhat * mh)
        out = np.empty(ws.wshape + (3,))
        for c in range(3):
            fh = ws.fwd_sup(np.ascontiguousarray(x[:, :, c]))
            out[:, :, c] = ws.read_win(self.hhat * fh) - ws.bw[:, :, c] * hm
        return out

    def adjoint(self, r):
        ws = self.ws
        out = np.empty((ws.side, ws.side, 4))
        acc_b = None
        for c in range(3):
            rc_hat = ws.fwd_win(r[:, :, c])
            out[:, :, c] = ws.read_sup(rc_hat * np.conj(self.hhat))
            bh = ws.fwd_win(ws.bw[:, :, c] * r[:, :, c])
            acc_b = bh if acc_b is None else acc_b + bh
        out[:, :, 3] = -ws.read_sup(acc_b * np.conj(self.hhat))
        return out

    def normal(self, x):
        out = self.adjoint(self.forward(x))
        for c in range(3):
            out[:, :, c] += self.rho1 * _linops.grad_normal(x[:, :, c])
        out += self.rho2 * x
        if self.lam > 0:
            resid = x[:, :, :3] - x[:, :, 3:4] * self.template
            out[:, :, :3] += self.lam * resid
            out[:, :, 3] -= self.lam * np.sum(self.template * resid, axis=2)
            if self.mask_template is not None:
                out[:, :, 3] += self.lam * x[:, :, 3]
        return out

    def blocks(self):
        s = self.ws.side
        cols = np.arange(s)
        gl = (cols < s - 1).astype(np.float64) + (cols >= 1)
        gdiag = gl[None, :] + gl[:, None]  # x-part + y-part
        blocks = np.zeros((s * s, 4, 4))
        a = self.hnorm2 + self.rho2
        gflat = (self.rho1 * gdiag).ravel()
        for c in range(3):
            blocks[:, c, c] = a + gflat
            blocks[:, c, 3] = self.cross[:, :, c].ravel()
            blocks[:, 3, c] = self.cross[:, :, c].ravel()
        blocks[:, 3, 3] = self.mm.ravel() + self.rho2
        if self.lam > 0:
            tsq = np.sum(self.template ** 2, axis=2).ravel()
            for c in range(3):
                blocks[:, c, c] += self.lam
                tflat = self.lam * self.template[:, :, c].ravel()
                blocks[:, c, 3] -= tflat
                blocks[:, 3, c] -= tflat
            blocks[:, 3, 3] += self.lam * tsq
            if self.mask_template is not None:
                blocks[:, 3, 3] += self.lam
        return blocks

    def precond(self):
        inv = np.linalg.inv(self.blocks())
        s = self.ws.side

        def apply(r):
            flat = r.reshape(s * s, 4, 1)
            return np.matmul(inv, flat).reshape(s, s, 4)

        return apply


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def project_onto_c(f, m):
    """Pixelwise projection onto {0 <= F_c <= M <= 1}; returns (F, M)."""
    f = np.asarray(f, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    stacked = np.concatenate([f.reshape(-1, 3), m.reshape(-1, 1)], axis=1)
    out = kernels.dykstra_project(np.ascontiguousarray(stacked))
    return out[:, :3].reshape(f.shape), out[:, 3].reshape(m.shape)


def _solve_fm(ws, h, params, template=None, x0=None, state=None, support=None,
              mask_template=None):
    """ADMM for the model given a fixed kernel; returns ((F, M), state).

    ``template`` is the fixed appearance ``Fhat`` on the model support
    (or None to drop the agreement term); ``mask_template`` optionally
    adds the mask-agreement quadratic; ``x0`` seeds the first solve.
    ``support`` optionally restricts the model to a pixel footprint:
    outside it the constraint set shrinks to {0}, which the projection
    step enforces exactly.
    """
    op = FmStepOperator(ws, h, params.rho1, params.rho2,
                        params.lambda_tmpl, template, mask_template)
    precond = op.precond()
    b = ws.iw - ws.bw
    atb = op.adjoint(b)
    if op.mask_template is not None:
        atb[:, :, 3] += op.lam * op.mask_template
    s = ws.side
    if state is None:
        x = x0.copy() if x0 is not None else np.zeros((s, s, 4))
        zx = np.zeros((s, s, 3))
        zy = np.zeros((s, s, 3))
        ux = np.zeros((s, s, 3))
        uy = np.zeros((s, s, 3))
        z2 = x.copy()
        u2 = np.zeros((s, s, 4))
    else:
        x, zx, zy, ux, uy, z2, u2 = state
    thresh = params.alpha_f / params.rho1
    for _ in range(params.max_inner_iters):
        rhs = atb + params.rho2 * (z2 - u2)
        for c in range(3):
            rhs[:, :, c] += params.rho1 * (
                _linops.grad_x_adjoint(zx[:, :, c] - ux[:, :, c])
                + _linops.grad_y_adjoint(zy[:, :, c] - uy[:, :, c]))
        x_new, _, _ = _linops.cg_solve(op.normal, rhs, x0=x, tol=params.cg_tol,
                                       max_iter=params.cg_max_iters,
                                       precond=precond)
        gx = np.stack([_linops.grad_x(x_new[:, :, c]) for c in range(3)], axis=2)
        gy = np.stack([_linops.grad_y(x_new[:, :, c]) for c in range(3)], axis=2)
        zx = _soft(gx + ux, thresh)
        zy = _soft(gy + uy, thresh)
        ux = ux + gx - zx
        uy = uy + gy - zy
        f2, m2 = project_onto_c(x_new[:, :, :3] + u2[:, :, :3],
                                x_new[:, :, 3] + u2[:, :, 3])
        if support is not None:
            f2[~support] = 0.0
            m2[~support] = 0.0
        z2_new = np.concatenate([f2, m2[:, :, None]], axis=2)
        x_shift = float(np.linalg.norm(x_new - x))
        z_shift = float(np.linalg.norm(z2_new - z2))
        x, z2 = x_new, z2_new
        u2 = u2 + x - z2
        # same progress-based stop as the kernel loop: the returned z2
        # settles well before the consensus gap does
        scale = max(float(np.linalg.norm(x)), 1e-12)
        if max(x_shift, z_shift) <= params.rel_tol * scale:
            break
    return z2, (x, zx, zy, ux, uy, z2, u2)


# ----------------------------------------------------------- full solver

def _objective(ws, h, x, params, template=None, mask_template=None):
    f = x[:, :, :3]
    hhat = ws.fwd_win(h)
    hm = ws.read_win(hhat * ws.fwd_sup(np.ascontiguousarray(x[:, :, 3])))
    data = 0.0
    for c in range(3):
        hf = ws.read_win(hhat * ws.fwd_sup(np.ascontiguousarray(f[:, :, c])))
        resid = hf - ws.bw[:, :, c] * hm - (ws.iw[:, :, c] - ws.bw[:, :, c])
        data += 0.5 * float(np.sum(resid * resid))
    tv = sum(float(np.abs(_linops.grad_x(f[:, :, c])).sum()
                   + np.abs(_linops.grad_y(f[:, :, c])).sum()) for c in range(3))
    sparsity = float(np.abs(h).sum())
    value = data + params.alpha_f * tv + params.alpha_h * sparsity
    if template is not None and params.lambda_tmpl > 0:
        resid_t = f - x[:, :, 3:4] * template
        value += 0.5 * params.lambda_tmpl * float(np.sum(resid_t ** 2))
        if mask_template is not None:
            resid_m = x[:, :, 3] - mask_template
            value += 0.5 * params.lambda_tmpl * float(np.sum(resid_m ** 2))
    return value


def _embed_centered(data, side):
    """Center an (h, w, ...) array on a zero canvas of the given side."""
    h, w = data.shape[:2]
    if h > side or w > side:
        raise DeblatError("template larger than the model support")
    y0 = (side - h) // 2
    x0 = (side - w) // 2
    out = np.zeros((side, side) + data.shape[2:])
    out[y0:y0 + h, x0:x0 + w] = data
    return out


def _support_side(radius, template, m_init):
    """Smallest odd support covering the radius guess and any given rasters."""
    dims = []
    if radius is not None:
        dims.append(model_side_for_radius(radius))
    for raster in (template, m_init):
        if raster is None:
            continue
        if isinstance(raster, ObjectModel):
            dims.append(raster.side)
        else:
            dims.append(max(raster.height, raster.width))
    if not dims:
        raise DeblatError("need a radius or a template to size the model support")
    side = max(dims)
    return side if side % 2 == 1 else side + 1


def _disk_footprint(side, radius):
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side]
    return (yy - c) ** 2 + (xx - c) ** 2 <= radius * radius


def _initial_field(template, m_init, side, radius=None):
    """Starting point, template appearance/mask and model footprint.

    The appearance starts as ``M0 * Fhat`` with ``Fhat`` all-ones when
    nothing is prescribed. A blind start is badly underdetermined on a
    support sized for the blur search: the model can absorb part of the
    streak while the kernel contracts, trading appearance for motion
    with little cost. A radius-based start therefore confines the model
    to the expected disk footprint; the mask upper bound then fixes the
    intensity split from above and the footprint pins both the position
    and the streak/object factorization. Returns ``(x0, fhat, mhat,
    support)`` where ``fhat``/``mhat`` feed the agreement term.
    """
    support = None
    m_tmpl = None
    if template is None:
        fhat = np.ones((side, side, 3))
        tmpl = None
        if m_init is not None:
            m0 = _embed_centered(np.atleast_3d(m_init.data), side)[:, :, 0]
            support = m0 > 0
        else:
            m0 = ball_model(radius, (1.0, 1.0, 1.0)).M.data[:, :, 0]
            m0 = _embed_centered(m0, side)
            support = _disk_footprint(side, radius + 1.0)
    else:
        if isinstance(template, ObjectModel):
            # The agreement term carves the object out of a plain
            # appearance patch, so divide out the mask: the model F is
            # mask-weighted while the template appearance must not be.
            m_tmpl = _embed_centered(template.M.data, side)[:, :, 0]
            f_pre = _embed_centered(template.F.data, side)
            fhat = np.divide(f_pre, m_tmpl[:, :, None],
                             out=np.zeros_like(f_pre),
                             where=m_tmpl[:, :, None] > 1e-6)
            fhat = np.clip(fhat, 0.0, 1.0)
            support = m_tmpl > 1e-6
        else:
            fhat = _embed_centered(template.as_rgb().data, side)
        tmpl = fhat
        if m_init is not None:
            m0 = _embed_centered(np.atleast_3d(m_init.data), side)[:, :, 0]
            if m_tmpl is None:
                support = m0 > 0
        elif m_tmpl is not None:
            m0 = m_tmpl
        else:
            m0 = np.ones((side, side))
    x = np.concatenate([m0[:, :, None] * fhat, m0[:, :, None]], axis=2)
    return x, tmpl, m_tmpl, support


def _integer_shift(a, dy, dx):
    """Shift leading two axes by integer offsets, filling with zeros."""
    out = np.zeros_like(a)
    h, w = a.shape[:2]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    dst_y = slice(max(dy, 0), h + min(dy, 0))
    dst_x = slice(max(dx, 0), w + min(dx, 0))
    src_y = slice(max(-dy, 0), h + min(-dy, 0))
    src_x = slice(max(-dx, 0), w + min(-dx, 0))
    out[dst_y, dst_x] = a[src_y, src_x]
    return out


def _recenter_shift(x):
    """Integer shift that moves the mask centroid to the support center.

    Swapping a shift between the kernel and the model leaves the
    composite unchanged, so without a template the split is arbitrary;
    pinning the mask centroid fixes it. The shift is clamped so no mask
    support is pushed off the raster.
    """
    m = x[:, :, 3]
    w = m * m  # squared mask: low-amplitude dust barely moves the centroid
    tot = float(w.sum())
    if tot <= 1e-9:
        return 0, 0
    s = m.shape[0]
    c = (s - 1) / 2.0
    idx = np.arange(s)
    cy = float((w.sum(axis=1) * idx).sum() / tot)
    cx = float((w.sum(axis=0) * idx).sum() / tot)
    dy = int(round(c - cy))
    dx = int(round(c - cx))
    ys, xs = np.nonzero(m > 1e-12)
    dy = min(dy, s - 1 - ys.max()) if dy > 0 else max(dy, -ys.min())
    dx = min(dx, s - 1 - xs.max()) if dx > 0 else max(dx, -xs.min())
    return dy, dx


def _result_psf(ws, h):
    nz = np.argwhere(h > 0)
    if nz.size == 0:
        return Psf(np.zeros((1, 1)), offset=(ws.domain.x0, ws.domain.y0))
    y0, x0 = nz.min(axis=0)
    y1, x1 = nz.max(axis=0) + 1
    return Psf(h[y0:y1, x0:x1],
               offset=(ws.window.x0 + int(x0), ws.window.y0 + int(y0)))


def _result_model(x):
    f, m = project_onto_c(x[:, :, :3], x[:, :, 3])
    return ObjectModel(RasterImage(f), RasterImage(m[:, :, None]))


def model_side_for_radius(radius):
    """Support side covering a diameter of slack around the object."""
    return 2 * int(np.ceil(2.0 * radius)) + 1


def deblatt(frame, background, region, radius=None, params=None,
            template=None, m_init=None):
    """Blind kernel/model estimation on a search region of one frame.

    ``template`` prescribes the object appearance (a raster, or a full
    model whose mask then also seeds ``M``) and activates the agreement
    term; ``m_init`` overrides the starting mask. With neither, the
    model support is sized from ``radius`` and estimation starts from
    the trivial all-ones model. Returns a :class:`DeblatResult` whose
    objective trace is non-increasing: an outer iteration that would
    raise it is rolled back and iteration stops.
    """
    params = params or DeblatParams()
    if region.height <= 0 or region.width <= 0:
        raise DeblatError("empty search region")
    side = _support_side(radius, template, m_init)
    ws = _Workspace(frame, background, region, side)
    x, tmpl, mhat, support = _initial_field(template, m_init, side, radius)

    h = np.zeros(ws.wshape)
    h_state = None
    fm_state = None
    trace = [_objective(ws, h, x, params, tmpl, mhat)]
    best = (h.copy(), x.copy())
    converged = False
    n_outer = 0
    for n_outer in range(1, params.max_outer_iters + 1):
        h, h_state = _solve_h(ws, x[:, :, :3], x[:, :, 3], params, h_state)
        x, fm_state = _solve_fm(ws, h, params, tmpl, x0=x, state=fm_state,
                                support=support, mask_template=mhat)
        if tmpl is None and support is None:
            dy, dx = _recenter_shift(x)
            if (dy, dx) != (0, 0):
                x = _integer_shift(x, dy, dx)
                fm_state = tuple(_integer_shift(a, dy, dx) for a in fm_state)
                h = _integer_shift(h, -dy, -dx)
                h_state = tuple(_integer_shift(a, -dy, -dx) for a in h_state)
        value = _objective(ws, h, x, params, tmpl, mhat)
        slack = 1e-9 * max(1.0, abs(trace[-1]))
        if value > trace[-1] + slack:
            h, x = best
            break
        trace.append(value)
        best = (h.copy(), x.copy())
        if abs(trace[-2] - value) <= params.rel_tol * max(1.0, trace[-2]):
            converged = True
            break
    return DeblatResult(psf=_result_psf(ws, h), model=_result_model(x),
                        objective=trace, converged=converged,
                        n_outer=n_outer, window=ws.window)


def estimate_h(frame, background, region, model, params=None):
    """Kernel-only estimation with a fixed object model."""
    params = params or DeblatParams()
    ws = _Workspace(frame, background, region, model.side)
    F = model.F.data
    M = model.M.data[:, :, 0]
    h, _ = _solve_h(ws, F, M, params)
    return _result_psf(ws, h)


def estimate_fm(frame, background, psf, radius=None, params=None,
                template=None, m_init=None):
    """Model-only estimation with a fixed kernel."""
    params = params or DeblatParams()
    side = _support_side(radius, template, m_init)
    region = Region.from_bounds(psf.offset[0], psf.offset[1],
                                psf.offset[0] + psf.width - 1,
                                psf.offset[1] + psf.height - 1)
    ws = _Workspace(frame, background, region, side)
    h = ws.embed_kernel(psf)
    x0, tmpl, mhat, _ = _initial_field(template, m_init, side, radius)
    x, _ = _solve_fm(ws, h, params, tmpl, x0=x0, mask_template=mhat)
    return _result_model(x)
