"""Trajectory-level scoring.

The metric is trajectory IoU: the intersection-over-union of two
equal-radius disks swept along the predicted and ground-truth curves,
averaged over uniformly spaced sample times. Because a blur kernel
carries no arrow of time, predictions are scored under the better of
the two curve directions.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from deblat.curves import PiecewiseCurve

DEFAULT_TIOU_SAMPLES = 11


@dataclass(frozen=True)
class GroundTruthEntry:
    frame_index: int
    curve: PiecewiseCurve
    radius: float


def disk_iou(dist, radius):
    """IoU of two disks of equal radius whose centers are ``dist`` apart."""
    r = float(radius)
    d = float(dist)
    if d >= 2.0 * r:
        return 0.0
    if d <= 0.0:
        return 1.0
    inter = 2.0 * r * r * math.acos(d / (2.0 * r)) - 0.5 * d * math.sqrt(4.0 * r * r - d * d)
    union = 2.0 * math.pi * r * r - inter
    return inter / union


def tiou(pred, truth, radius, n_samples=DEFAULT_TIOU_SAMPLES):
    """Mean disk IoU between two curves at n uniformly spaced times."""
    if pred is None:
        return 0.0
    ts = np.linspace(0.0, 1.0, n_samples)
    a = pred.evaluate(ts)
    b = truth.evaluate(ts)
    dist = np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1])
    return float(np.mean([disk_iou(d, radius) for d in dist]))


def tiou_directionless(pred, truth, radius, n_samples=DEFAULT_TIOU_SAMPLES):
    """TIoU under the better of the two time directions of the prediction."""
    if pred is None:
        return 0.0
    return max(tiou(pred, truth, radius, n_samples),
               tiou(pred.reversed(), truth, radius, n_samples))


def baseline_curves(truth):
    """Constant-velocity linear predictions from ground-truth midpoints.

    Velocity at frame i is the central difference of mid-exposure
    positions (one-sided at the sequence ends); each line spans the same
    exposure window as its ground-truth curve.
    """
    mids = np.array([e.curve.evaluate(0.5) for e in truth])
    spans = []
    for e in truth:
        p0 = e.curve.evaluate(0.0)
        p1 = e.curve.evaluate(1.0)
        spans.append(np.hypot(*(p1 - p0)))
    out = []
    n = len(truth)
    for i in range(n):
        if n == 1:
            v = np.zeros(2)
        elif i == 0:
            v = mids[1] - mids[0]
        elif i == n - 1:
            v = mids[-1] - mids[-2]
        else:
            v = 0.5 * (mids[i + 1] - mids[i - 1])
        speed = np.hypot(*v)
        scale = spans[i] / speed if speed > 0 else 0.0
        start = mids[i] - 0.5 * scale * v
        out.append(PiecewiseCurve.from_line(start, start + scale * v))
    return out


@dataclass
class SequenceReport:
    n_frames: int
    mean_tiou: float
    recall: float
    per_frame: list
    status_counts: dict

    def to_json_dict(self):
        return {
            "n_frames": self.n_frames,
            "mean_tiou": self.mean_tiou,
            "recall": self.recall,
            "status_counts": dict(self.status_counts),
            "per_frame": [
                {"frame": f, "tiou": t, "status": s} for f, t, s in self.per_frame
            ],
        }

    def format_table(self):
        lines = ["frame  tiou    status", "-----  ------  ----------"]
        for f, t, s in self.per_frame:
            lines.append(f"{f:5d}  {t:6.4f}  {s}")
        lines.append("-----  ------  ----------")
        lines.append(f"mean TIoU {self.mean_tiou:.4f}   recall {self.recall:.4f}"
                     f"   frames {self.n_frames}")
        return "\n".join(lines)


def score_sequence(results, truth, n_samples=DEFAULT_TIOU_SAMPLES):
    """Score tracker outputs against ground truth on shared frame indices.

    Frames where the tracker reports no curve score zero. Recall is the
    fraction of scored frames whose prediction overlaps the truth at all.
    """
    truth_by_frame = {e.frame_index: e for e in truth}
    per_frame = []
    counts = {}
    for res in results:
        entry = truth_by_frame.get(res.frame_index)
        if entry is None:
            continue
        status = getattr(res, "status", "")
        counts[status] = counts.get(status, 0) + 1
        value = tiou_directionless(res.curve, entry.curve, entry.radius, n_samples)
        per_frame.append((res.frame_index, value, status))
    if not per_frame:
        return SequenceReport(0, 0.0, 0.0, [], {})
    values = np.array([t for _, t, _ in per_frame])
    return SequenceReport(
        n_frames=len(per_frame),
        mean_tiou=float(values.mean()),
        recall=float(np.mean(values > 0.0)),
        per_frame=per_frame,
        status_counts=counts,
    )


# Ground-truth files: one CSV row per frame, curve stored as polynomial
# coefficients (two pieces of degree <= 2 in x and y, plus the breakpoint).

_CSV_FIELDS = ["frame", "radius", "npieces", "tbreak"] + [
    f"p{p}{ax}{k}" for p in (0, 1) for ax in ("x", "y") for k in (0, 1, 2)
]


def _piece_row(piece):
    # piece rows are t^k coefficients for (x, y); flatten x0..x2, y0..y2
    return [piece[k, 0] for k in range(3)] + [piece[k, 1] for k in range(3)]


def write_ground_truth(path, entries):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_FIELDS)
        for e in entries:
            pieces = e.curve.pieces
            row = [e.frame_index, repr(float(e.radius)), len(pieces),
                   repr(float(e.curve.tbreak))]
            row += [repr(float(v)) for v in _piece_row(pieces[0])]
            if len(pieces) == 2:
                row += [repr(float(v)) for v in _piece_row(pieces[1])]
            else:
                row += [""] * 6
            writer.writerow(row)


def _row_piece(vals):
    arr = np.zeros((3, 2))
    arr[:, 0] = [float(v) for v in vals[0:3]]
    arr[:, 1] = [float(v) for v in vals[3:6]]
    return arr


def read_ground_truth(path):
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _CSV_FIELDS:
            raise ValueError(f"unrecognized ground-truth header in {path}")
        for row in reader:
            frame = int(row[0])
            radius = float(row[1])
            npieces = int(row[2])
            tbreak = float(row[3])
            pieces = [_row_piece(row[4:10])]
            if npieces == 2:
                pieces.append(_row_piece(row[10:16]))
                curve = PiecewiseCurve(tuple(pieces), tbreak)
            else:
                curve = PiecewiseCurve((pieces[0],), 1.0)
            entries.append(GroundTruthEntry(frame, curve, radius))
    return entries


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
        fh.write("\n")
