"""Raster containers and convolution/gradient primitives.

Coordinate conventions used across the package:

* arrays are indexed ``[y, x]`` (row major), pixel centers at integer
  coordinates;
* a :class:`Psf` stores its raster together with ``offset = (x0, y0)``, the
  frame coordinate of ``weights[0, 0]``;
* object-model rasters (appearance, mask) are anchored at their center
  pixel, so convolving a PSF with a model places the model centered on
  every PSF pixel.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from deblat import _linops


class ImagingError(ValueError):
    """Raised for malformed rasters, kernels or regions."""


def _normalize_planes(arr):
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ImagingError(f"expected (h, w) or (h, w, {{1,3}}) array, got {a.shape}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise ImagingError("empty raster")
    if not np.all(np.isfinite(a)):
        raise ImagingError("raster contains non-finite values")
    return np.ascontiguousarray(a)


@dataclass(frozen=True)
class RasterImage:
    """Multi-channel 2-D intensity grid; frames and backgrounds live in [0,1]."""

    data: np.ndarray

    def __post_init__(self):
        a = _normalize_planes(self.data)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def plane(self, c):
        return self.data[:, :, c]

    def as_rgb(self):
        """Three-channel view; grayscale is replicated across channels."""
        if self.channels == 3:
            return self
        return RasterImage(np.repeat(self.data, 3, axis=2))

    def clamped(self):
        return RasterImage(np.clip(self.data, 0.0, 1.0))

    def in_unit_range(self, tol=0.0):
        return bool(self.data.min() >= -tol and self.data.max() <= 1.0 + tol)

    @classmethod
    def zeros(cls, width, height, channels=1):
        return cls(np.zeros((height, width, channels)))

    @classmethod
    def full(cls, width, height, value):
        v = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(np.broadcast_to(v, (height, width, v.size)).copy())


@dataclass(frozen=True)
class Psf:
    """Nonnegative blur raster with a frame-coordinate offset.

    ``offset = (x0, y0)`` positions ``weights[0, 0]`` in the frame.
    """

    weights: np.ndarray
    offset: tuple = (0, 0)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.size == 0:
            raise ImagingError("PSF raster must be a nonempty 2-D array")
        if not np.all(np.isfinite(w)):
            raise ImagingError("PSF contains non-finite values")
        if w.min() < -1e-12:
            raise ImagingError(f"PSF has negative weights (min {w.min():g})")
        w = np.ascontiguousarray(np.maximum(w, 0.0))
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "offset", (int(self.offset[0]), int(self.offset[1])))

    @property
    def height(self):
        return self.weights.shape[0]

    @property
    def width(self):
        return self.weights.shape[1]

    @property
    def total_mass(self):
        return float(self.weights.sum())

    @classmethod
    def unit_impulse(cls, x=0, y=0):
        return cls(np.ones((1, 1)), offset=(x, y))

    def point_set(self, rel_threshold=1e-3):
        """(x, y, w) arrays of pixels above rel_threshold * max, frame coords."""
        w = self.weights
        if w.size == 0 or w.max() <= 0:
            return np.empty(0), np.empty(0), np.empty(0)
        iy, ix = np.nonzero(w > rel_threshold * w.max())
        return (ix + self.offset[0]).astype(np.float64), \
               (iy + self.offset[1]).astype(np.float64), w[iy, ix].copy()


@dataclass(frozen=True)
class Region:
    """Half-open pixel rectangle [x0, x1) x [y0, y1) with an optional mask."""

    x0: int
    y0: int
    x1: int
    y1: int
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ImagingError("empty region")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != (self.height, self.width):
                raise ImagingError("region mask shape mismatch")
            object.__setattr__(self, "mask", m)

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    def dilated(self, margin):
        m = int(np.ceil(margin))
        return Region(self.x0 - m, self.y0 - m, self.x1 + m, self.y1 + m)

    def clipped(self, frame_width, frame_height):
        r = Region(max(0, self.x0), max(0, self.y0),
                   min(frame_width, self.x1), min(frame_height, self.y1)) \
            if self.x0 < frame_width and self.y0 < frame_height \
            and self.x1 > 0 and self.y1 > 0 else None
        if r is None:
            raise ImagingError("region entirely outside frame")
        return r

    def inside(self, frame_width, frame_height):
        return self.x0 >= 0 and self.y0 >= 0 and \
            self.x1 <= frame_width and self.y1 <= frame_height

    @classmethod
    def from_bounds(cls, xmin, ymin, xmax, ymax):
        return cls(int(np.floor(xmin)), int(np.floor(ymin)),
                   int(np.ceil(xmax)) + 1, int(np.ceil(ymax)) + 1)


def _check_kernel(kernel):
    if kernel.weights.size == 0:
        raise ImagingError("empty kernel")
    if kernel.weights.shape[0] > 1 << 15 or kernel.weights.shape[1] > 1 << 15:
        raise ImagingError("kernel dimensions overflow")


def convolve(image, kernel, boundary="zero", method="auto"):
    """Same-size convolution of every channel with a PSF kernel.

    ``boundary`` selects how reads outside the image behave: ``"zero"``
    pads with zeros, ``"replicate"`` clamps to the nearest edge pixel.
    Kernels with many taps run through the FFT path, small ones through
    direct summation; the two agree to 1e-10.
    """
    _check_kernel(kernel)
    ox, oy = kernel.offset
    if boundary == "zero":
        conv = _linops.conv_offset_zero
    elif boundary == "replicate":
        conv = _linops.conv_offset_replicate
    else:
        raise ImagingError(f"unknown boundary {boundary!r}")
    out = np.empty_like(image.data)
    for c in range(image.channels):
        out[:, :, c] = conv(image.plane(c), kernel.weights, oy, ox, method)
    return RasterImage(out)


def correlate(image, kernel, boundary="zero", method="auto"):
    """Exact adjoint of :func:`convolve` under the same boundary rule."""
    _check_kernel(kernel)
    ox, oy = kernel.offset
    if boundary == "zero":
        corr = _linops.corr_offset_zero
    elif boundary == "replicate":
        corr = _linops.corr_offset_replicate
    else:
        raise ImagingError(f"unknown boundary {boundary!r}")
    out = np.empty_like(image.data)
    for c in range(image.channels):
        out[:, :, c] = corr(image.plane(c), kernel.weights, oy, ox, method)
    return RasterImage(out)


def spatial_gradient(image):
    """Forward-difference gradients (gx, gy); last column/row are zero."""
    gx = np.empty_like(image.data)
    gy = np.empty_like(image.data)
    for c in range(image.channels):
        gx[:, :, c] = _linops.grad_x(image.plane(c))
        gy[:, :, c] = _linops.grad_y(image.plane(c))
    return RasterImage(gx), RasterImage(gy)
