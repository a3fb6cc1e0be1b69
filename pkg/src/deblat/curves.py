"""Piecewise quadratic intra-frame trajectories C(t), t in [0, 1].

A curve has one or two polynomial pieces of degree <= 2 that meet
continuously at the breakpoint; single-piece curves use tbreak = 1.
Coefficients are stored per piece as a (3, 2) array: row k holds the
t^k coefficient for (x, y).
"""

from dataclasses import dataclass

import numpy as np

CONTINUITY_TOL = 1e-9


class CurveError(ValueError):
    pass


def _poly_eval(coef, t):
    t = np.asarray(t, dtype=np.float64)
    return coef[0] + t[..., None] * (coef[1] + t[..., None] * coef[2])


def _poly_shift(coef, delta):
    """Coefficients of p(t + delta) in powers of t."""
    c0, c1, c2 = coef
    return np.stack([
        c0 + c1 * delta + c2 * delta * delta,
        c1 + 2.0 * c2 * delta,
        c2,
    ])


@dataclass(frozen=True)
class PiecewiseCurve:
    pieces: tuple
    tbreak: float = 1.0

    def __post_init__(self):
        pieces = tuple(np.ascontiguousarray(p, dtype=np.float64) for p in self.pieces)
        if len(pieces) not in (1, 2):
            raise CurveError("curve must have 1 or 2 pieces")
        for p in pieces:
            if p.shape != (3, 2):
                raise CurveError(f"piece coefficients must be (3, 2), got {p.shape}")
            if not np.all(np.isfinite(p)):
                raise CurveError("non-finite curve coefficients")
        tb = float(self.tbreak)
        if len(pieces) == 1:
            tb = 1.0
        else:
            if not 0.0 < tb < 1.0:
                raise CurveError(f"breakpoint {tb} outside (0, 1)")
            gap = np.abs(_poly_eval(pieces[0], tb) - _poly_eval(pieces[1], tb))
            if gap.max() > CONTINUITY_TOL:
                raise CurveError(f"pieces discontinuous at breakpoint (gap {gap.max():g})")
        for p in pieces:
            p.setflags(write=False)
        object.__setattr__(self, "pieces", pieces)
        object.__setattr__(self, "tbreak", tb)

    @property
    def n_pieces(self):
        return len(self.pieces)

    def evaluate(self, t):
        """Point on the curve; t outside [0, 1] extrapolates the end pieces."""
        t = np.asarray(t, dtype=np.float64)
        if self.n_pieces == 1:
            out = _poly_eval(self.pieces[0], t)
        else:
            first = _poly_eval(self.pieces[0], t)
            second = _poly_eval(self.pieces[1], t)
            out = np.where((t <= self.tbreak)[..., None], first, second)
        return out

    def velocity(self, t):
        t = np.asarray(t, dtype=np.float64)

        def dpoly(coef):
            return coef[1] + 2.0 * t[..., None] * coef[2]

        if self.n_pieces == 1:
            return dpoly(self.pieces[0])
        return np.where((t <= self.tbreak)[..., None],
                        dpoly(self.pieces[0]), dpoly(self.pieces[1]))

    def sample(self, n):
        return self.evaluate(np.linspace(0.0, 1.0, n))

    def arc_length(self, n=512):
        pts = self.sample(n)
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())

    def bounds(self, n=256):
        pts = self.sample(n)
        return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()

    def reversed(self):
        """The same geometry traced backwards: C'(t) = C(1 - t)."""
        flipped = []
        for p in self.pieces[::-1]:
            c0, c1, c2 = _poly_shift(p, 1.0)   # p(1 + s)
            flipped.append(np.stack([c0, -c1, c2]))  # s -> -t
        if len(flipped) == 1:
            return PiecewiseCurve((flipped[0],))
        return PiecewiseCurve(tuple(flipped), tbreak=1.0 - self.tbreak)

    def extrapolate_next(self):
        """Single-piece curve for the following frame: C'(t) = C(t + 1)."""
        return PiecewiseCurve((_poly_shift(self.pieces[-1], 1.0),))

    def subcurve(self, t0, t1):
        """Reparametrized restriction to [t0, t1] mapped onto [0, 1].

        Breakpoints strictly inside (t0, t1) are preserved; a piece is used
        on its own extrapolation side when the window leaves [0, 1].
        """
        if not t1 > t0:
            raise CurveError("empty parameter window")
        span = t1 - t0

        def remap(coef):
            # p(t0 + span * s) as a polynomial in s
            shifted = _poly_shift(coef, t0)
            return np.stack([shifted[0], shifted[1] * span, shifted[2] * span * span])

        if self.n_pieces == 2 and t0 < self.tbreak < t1:
            return PiecewiseCurve(
                (remap(self.pieces[0]), remap(self.pieces[1])),
                tbreak=(self.tbreak - t0) / span,
            )
        if self.n_pieces == 2 and t1 <= self.tbreak:
            return PiecewiseCurve((remap(self.pieces[0]),))
        return PiecewiseCurve((remap(self.pieces[-1]),))

    def to_json_dict(self):
        return {
            "pieces": [[list(map(float, row)) for row in p] for p in self.pieces],
            "tbreak": float(self.tbreak),
        }

    @classmethod
    def from_json_dict(cls, d):
        pieces = tuple(np.asarray(p, dtype=np.float64) for p in d["pieces"])
        return cls(pieces, tbreak=float(d.get("tbreak", 1.0)))

    @classmethod
    def from_line(cls, p0, p1):
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        return cls((np.stack([p0, p1 - p0, np.zeros(2)]),))

    @classmethod
    def from_point(cls, p):
        p = np.asarray(p, dtype=np.float64)
        return cls((np.stack([p, np.zeros(2), np.zeros(2)]),))

    @classmethod
    def from_breakpoint_form(cls, joint, piece_coefs, tbreak):
        """Build from shifted-basis pieces a(s) = joint + a1 s + a2 s^2, s = t - tbreak.

        Continuity at the breakpoint is structural: every piece shares the
        constant term ``joint``.
        """
        joint = np.asarray(joint, dtype=np.float64)
        pieces = []
        for a1, a2 in piece_coefs:
            shifted = np.stack([joint, np.asarray(a1, dtype=np.float64),
                                np.asarray(a2, dtype=np.float64)])
            pieces.append(_poly_shift(shifted, -tbreak))
        if len(pieces) == 1:
            return cls((pieces[0],))
        return cls(tuple(pieces), tbreak=tbreak)


def mean_curve_distance(curve_a, curve_b, n=200, m=None):
    """Mean over samples of A of the distance to B as a point set (one-sided).

    B is sampled at 2n-1 points by default so its parameter grid contains
    A's exactly; identical curves then measure zero.
    """
    if m is None:
        m = 2 * n - 1
    pa = curve_a.sample(n)
    pb = curve_b.sample(m)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).mean())


def symmetric_curve_distance(curve_a, curve_b, n=200):
    return 0.5 * (mean_curve_distance(curve_a, curve_b, n)
                  + mean_curve_distance(curve_b, curve_a, n))
