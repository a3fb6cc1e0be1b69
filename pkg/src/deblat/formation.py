"""Forward image formation and the synthetic-sequence generator.

A frame is composed as ``I = H*F + (1 - H*M) B``: the object appearance
blurred by its own motion plus the background attenuated by the blurred
mask. Curves are rasterized into blur kernels by dense uniform-in-t
sampling with bilinear splatting, so a pixel receives mass proportional
to the time the object center spends on it.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from deblat import _linops, kernels
from deblat.curves import CurveError, PiecewiseCurve
from deblat.evaluate import GroundTruthEntry
from deblat.imaging import ImagingError, Psf, RasterImage

SAMPLES_PER_PIECE = 10_000


class FormationError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectModel:
    """Appearance F (3-channel) and mask M (1-channel) on a common support."""

    F: RasterImage
    M: RasterImage
    tol: float = 1e-9

    def __post_init__(self):
        if self.F.channels != 3 or self.M.channels != 1:
            raise FormationError("object model needs 3-channel F and 1-channel M")
        if (self.F.height, self.F.width) != (self.M.height, self.M.width):
            raise FormationError("F and M support size mismatch")
        f = self.F.data
        m = self.M.data
        if f.min() < -self.tol or m.min() < -self.tol or m.max() > 1.0 + self.tol:
            raise FormationError("object model violates 0 <= F, M <= 1")
        if np.max(f - m) > self.tol:
            raise FormationError("object model violates F <= M")

    @property
    def side(self):
        return self.F.width

    @property
    def center(self):
        return ((self.F.width - 1) // 2, (self.F.height - 1) // 2)


def ball_model(radius, color, supersample=8):
    """Antialiased uniform disk: mask by coverage, appearance = color * mask."""
    if radius < 1:
        raise FormationError("object radius must be >= 1 px")
    half = int(np.ceil(radius)) + 1
    side = 2 * half + 1
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    yy, xx = np.mgrid[0:side, 0:side]
    cov = np.zeros((side, side))
    for dy in sub:
        for dx in sub:
            cov += ((xx + dx - half) ** 2 + (yy + dy - half) ** 2) <= radius ** 2
    cov /= supersample ** 2
    color = np.asarray(color, dtype=np.float64)
    mask = RasterImage(cov)
    appearance = RasterImage(cov[:, :, None] * color[None, None, :])
    return ObjectModel(appearance, mask)


def compose_frame(F, M, H, B):
    """I = H*F + (1 - H*M) B with the model anchored at its center pixel."""
    if F.channels != B.channels:
        raise FormationError("F and B channel mismatch")
    if (F.height, F.width) != (M.height, M.width):
        raise FormationError("F and M size mismatch")
    cy = (F.height - 1) // 2
    cx = (F.width - 1) // 2
    ox, oy = H.offset
    if ox < 0 or oy < 0 or ox + H.width > B.width or oy + H.height > B.height:
        raise FormationError("PSF support extends outside the frame")

    canvas = np.zeros((B.height, B.width))
    canvas[oy:oy + H.height, ox:ox + H.width] = H.weights

    hm = _linops.conv_offset_zero(canvas, M.plane(0), -cy, -cx)
    out = np.empty_like(B.data)
    for c in range(B.channels):
        hf = _linops.conv_offset_zero(canvas, F.plane(c), -cy, -cx)
        out[:, :, c] = hf + (1.0 - hm) * B.plane(c)
    return RasterImage(out)


def _curve_samples(curve, n_per_piece):
    """Midpoint samples uniform in t, with per-sample time weights."""
    if curve.n_pieces == 1:
        intervals = [(0.0, 1.0)]
    else:
        intervals = [(0.0, curve.tbreak), (curve.tbreak, 1.0)]
    ts = []
    ws = []
    for t0, t1 in intervals:
        length = t1 - t0
        t = t0 + (np.arange(n_per_piece) + 0.5) * (length / n_per_piece)
        ts.append(t)
        ws.append(np.full(n_per_piece, length / n_per_piece))
    return np.concatenate(ts), np.concatenate(ws)


def splat_curve(curve, x0, y0, width, height, total_mass,
                n_per_piece=SAMPLES_PER_PIECE):
    """Rasterize a curve onto a given canvas; mass renormalized exactly."""
    ts, ws = _curve_samples(curve, n_per_piece)
    pts = curve.evaluate(ts)
    out = np.zeros((height, width))
    deposited = kernels.splat_bilinear(pts[:, 0], pts[:, 1], ws, out, float(x0), float(y0))
    if deposited <= 0.0:
        raise FormationError("curve does not intersect the raster")
    out *= total_mass / out.sum()
    return out


def rasterize_curve(curve, frame_size, total_mass,
                    n_per_piece=SAMPLES_PER_PIECE):
    """Blur kernel of a trajectory: time-weighted bilinear splat, unit sum.

    ``frame_size`` is (width, height); the raster is the curve's bounding
    box padded by one pixel and clipped to the frame.
    """
    if not np.isfinite(total_mass) or total_mass <= 0:
        raise FormationError("total_mass must be positive")
    fw, fh = frame_size
    xmin, ymin, xmax, ymax = curve.bounds()
    if not all(map(np.isfinite, (xmin, ymin, xmax, ymax))):
        raise CurveError("degenerate curve with non-finite extent")
    x0 = max(0, int(np.floor(xmin)) - 1)
    y0 = max(0, int(np.floor(ymin)) - 1)
    x1 = min(fw - 1, int(np.ceil(xmax)) + 1)
    y1 = min(fh - 1, int(np.ceil(ymax)) + 1)
    if x1 < x0 or y1 < y0:
        raise FormationError("curve lies outside the frame")
    weights = splat_curve(curve, x0, y0, x1 - x0 + 1, y1 - y0 + 1, total_mass)
    return Psf(weights, offset=(x0, y0))


@dataclass
class SyntheticSpec:
    """Description of a synthetic test sequence.

    ``background`` is a flat color (3-sequence), a texture RasterImage, or a
    list of per-frame RasterImages. Ground-truth curves cover the full
    inter-frame interval; only the first ``exposure`` fraction is blurred
    into the frame.
    """

    width: int
    height: int
    background: object
    radius: float
    curves: list
    object_color: tuple = (0.85, 0.25, 0.2)
    noise_sigma: float = 0.0
    exposure: float = 1.0

    def __post_init__(self):
        if self.radius < 1:
            raise FormationError("radius must be >= 1")
        if self.noise_sigma < 0:
            raise FormationError("noise sigma must be >= 0")
        if not 0.0 < self.exposure <= 1.0:
            raise FormationError("exposure fraction must be in (0, 1]")

    def background_at(self, index):
        bg = self.background
        if isinstance(bg, RasterImage):
            return bg.as_rgb()
        if isinstance(bg, (list, tuple)) and bg and isinstance(bg[0], RasterImage):
            return bg[min(index, len(bg) - 1)].as_rgb()
        return RasterImage.full(self.width, self.height, np.asarray(bg, dtype=np.float64))


def synthesize_sequence(spec, seed=0):
    """Render frames and ground truth for a SyntheticSpec; deterministic."""
    rng = np.random.default_rng(seed)
    model = ball_model(spec.radius, spec.object_color)
    frames = []
    truth = []
    for i, curve in enumerate(spec.curves):
        background = spec.background_at(i)
        if (background.height, background.width) != (spec.height, spec.width):
            raise FormationError("background size does not match the spec")
        exposure_curve = curve.subcurve(0.0, spec.exposure)
        pts = exposure_curve.sample(256)
        r = spec.radius
        if (pts[:, 0].min() < -r or pts[:, 1].min() < -r
                or pts[:, 0].max() > spec.width - 1 + r
                or pts[:, 1].max() > spec.height - 1 + r):
            raise FormationError(f"frame {i}: curve leaves the frame by more than the radius")
        blur = rasterize_curve(exposure_curve, (spec.width, spec.height), 1.0)
        frame = compose_frame(model.F, model.M, blur, background)
        data = frame.data
        if spec.noise_sigma > 0:
            data = data + rng.normal(0.0, spec.noise_sigma, data.shape)
        frames.append(RasterImage(np.clip(data, 0.0, 1.0)))
        truth.append(GroundTruthEntry(frame_index=i, curve=exposure_curve,
                                      radius=spec.radius))
    return frames, truth
