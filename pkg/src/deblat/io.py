"""PNG and frame-sequence I/O.

Frames are 8-bit PNG files named ``frame_000001.png``, ... inside a
directory; intensities are divided by 255 on read with no gamma handling.
"""

import os
import re

import numpy as np
from PIL import Image

from deblat.imaging import ImagingError, RasterImage

_FRAME_RE = re.compile(r"frame_(\d+)\.png$")


def read_png(path):
    with Image.open(path) as im:
        if im.mode in ("RGBA", "P", "LA"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 3 and arr.shape[2] not in (1, 3):
        arr = arr[:, :, :3]
    return RasterImage(arr)


def write_png(path, image):
    data = np.clip(image.data, 0.0, 1.0)
    arr = np.round(data * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG")


def frame_filename(index):
    """1-based zero-padded frame name."""
    return f"frame_{index:06d}.png"


def list_frame_files(directory):
    entries = []
    for name in os.listdir(directory):
        m = _FRAME_RE.match(name)
        if m:
            entries.append((int(m.group(1)), os.path.join(directory, name)))
    entries.sort()
    return [p for _, p in entries]


def read_frame_dir(directory):
    paths = list_frame_files(directory)
    if not paths:
        raise ImagingError(f"no frame_*.png files in {directory}")
    return [read_png(p) for p in paths]


def write_frame_dir(directory, frames, start_index=1):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = os.path.join(directory, frame_filename(start_index + i))
        write_png(p, frame)
        paths.append(p)
    return paths
