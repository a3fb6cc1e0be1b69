"""Fast-moving-object detection against a running median background.

Used for tracker initialization and re-detection: maintain a temporal
median of recent frames, threshold the difference image, keep elongated
connected components, and summarize the winner by a coarse line segment
fitted to its morphological skeleton.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from deblat.imaging import RasterImage, Region

DIFF_THRESHOLD = 0.08
MIN_ELONGATION = 1.5


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class BackgroundBuffer:
    """Ring of the last few frames with their per-pixel median.

    The median is the lower order statistic at index (n-1)//2, which for
    the odd buffer sizes in normal use is the plain median; taking an
    observed value (rather than a midpoint average) keeps the background
    unchanged when it is fed back in as a frame.
    """

    frames: tuple = ()
    capacity: int = 3

    def __post_init__(self):
        if not 3 <= self.capacity <= 5:
            raise DetectorError(f"capacity must be 3..5, got {self.capacity}")
        frames = tuple(self.frames)
        if len(frames) > self.capacity:
            raise DetectorError("more frames than capacity")
        shapes = {f.data.shape for f in frames}
        if len(shapes) > 1:
            raise DetectorError("buffered frames differ in shape")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    @property
    def background(self):
        if not self.frames:
            raise DetectorError("background of an empty buffer")
        stack = np.stack([f.data for f in self.frames])
        k = (len(self.frames) - 1) // 2
        return RasterImage(np.partition(stack, k, axis=0)[k])


def update_background(buffer, frame):
    """New buffer with the frame appended; the oldest is evicted at capacity."""
    if buffer.frames and frame.data.shape != buffer.frames[0].data.shape:
        raise DetectorError("frame shape does not match the buffer")
    frames = (buffer.frames + (frame,))[-buffer.capacity:]
    return BackgroundBuffer(frames, buffer.capacity)


@dataclass(frozen=True)
class FmoDetection:
    """One detected streak: search region, coarse motion line, scores."""

    region: Region
    coarse_line: tuple
    saliency: float
    minor_width: float


def _thinning_elements():
    """The eight hit-or-miss structuring pairs of morphological thinning."""
    fg_edge = np.array([[0, 0, 0], [0, 1, 0], [1, 1, 1]], dtype=bool)
    bg_edge = np.array([[1, 1, 1], [0, 0, 0], [0, 0, 0]], dtype=bool)
    fg_corner = np.array([[0, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=bool)
    bg_corner = np.array([[0, 1, 1], [0, 0, 1], [0, 0, 0]], dtype=bool)
    pairs = []
    for k in range(4):
        pairs.append((np.rot90(fg_edge, k), np.rot90(bg_edge, k)))
        pairs.append((np.rot90(fg_corner, k), np.rot90(bg_corner, k)))
    return pairs


_THINNING_PAIRS = _thinning_elements()


def thin_mask(mask):
    """Iterative hit-or-miss thinning of a binary mask to a 1-px skeleton."""
    skel = mask.astype(bool).copy()
    while True:
        before = skel.sum()
        for fg, bg in _THINNING_PAIRS:
            hits = ndimage.binary_hit_or_miss(skel, structure1=fg,
                                              structure2=bg)
            skel &= ~hits
        if skel.sum() == before:
            return skel


def _component_moments(ys, xs):
    """Eigenvalues (major, minor) of the pixel-coordinate covariance."""
    coords = np.stack([xs, ys], axis=1).astype(np.float64)
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / len(coords)
    eigvals = np.linalg.eigvalsh(cov)
    return float(eigvals[1]), float(eigvals[0])


def detect_fmo(frame, background, min_area=16.0,
               diff_threshold=DIFF_THRESHOLD):
    """Most salient elongated difference blob, or None.

    The per-pixel channel-summed difference |frame - background| is
    thresholded, 8-connected components below ``min_area`` or with
    principal-axis elongation under 1.5 are discarded, and the remaining
    component of largest difference mass is thinned to a skeleton and
    summarized by a total-least-squares line segment.
    """
    if frame.data.shape != background.data.shape:
        raise DetectorError("frame and background differ in shape")
    diff = np.abs(frame.data - background.data).sum(axis=2)
    mask = diff > diff_threshold
    if not mask.any():
        return None
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    best = None
    for index in range(1, count + 1):
        ys, xs = np.nonzero(labels == index)
        if ys.size < min_area:
            continue
        major, minor = _component_moments(ys, xs)
        # 1/12 is the variance of the within-pixel quantization
        if np.sqrt((major + 1.0 / 12) / (minor + 1.0 / 12)) < MIN_ELONGATION:
            continue
        saliency = float(diff[ys, xs].sum())
        if best is None or saliency > best[0]:
            best = (saliency, ys, xs, minor)
    if best is None:
        return None
    saliency, ys, xs, minor = best
    component = np.zeros_like(mask)
    component[ys, xs] = True
    sk_ys, sk_xs = np.nonzero(thin_mask(component))
    pts = np.stack([sk_xs, sk_ys], axis=1).astype(np.float64)
    w = diff[sk_ys, sk_xs]
    mean = (pts * w[:, None]).sum(axis=0) / w.sum()
    centered = pts - mean
    cov = (centered * w[:, None]).T @ centered / w.sum()
    _, eigvecs = np.linalg.eigh(cov)
    direction = eigvecs[:, -1]
    s = centered @ direction
    p0 = mean + s.min() * direction
    p1 = mean + s.max() * direction
    minor_width = float(np.sqrt(12.0 * (minor + 1.0 / 12)))
    margin = int(np.ceil(minor_width / 2.0)) + 1
    region = Region(int(xs.min()), int(ys.min()),
                    int(xs.max()) + 1, int(ys.max()) + 1)
    region = region.dilated(margin).clipped(frame.width, frame.height)
    return FmoDetection(region=region, coarse_line=(p0, p1),
                        saliency=saliency, minor_width=minor_width)
