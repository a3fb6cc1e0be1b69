"""Vectorize a blur kernel into a piecewise-quadratic motion trajectory.

The kernel is treated as a weighted point cloud. Sequential RANSAC pulls out
salient linear and parabolic segments, segment pairs are joined into two-piece
candidates at their intersection, and every candidate is polished by an
ICP-style loop (closest-point correspondence, then a robust weighted
least-squares solve). Candidates compete on the rasterization error of the
curve against the input kernel.
"""

from dataclasses import dataclass, field

import numpy as np

from deblat import formation
from deblat.curves import PiecewiseCurve

# Refinement loop bounds: outer correspondence updates, inner reweighting
# passes, and the parameter change (in pixels) treated as converged.
ICP_MAX_ITERS = 10
ICP_PARAM_TOL = 1e-4
IRLS_MAX_PASSES = 25
IRLS_OBJ_TOL = 1e-10
# Smoothing of the robust point-to-curve distance, sqrt(r^2 + delta^2).
DIST_SMOOTH = 1e-6
# Fixed t-grid carrying the curve-length penalty. Grid points closer to the
# data than the deadband exert no pull, so a curve threading the point cloud
# is an exact fixed point of refinement.
LENGTH_GRID = 64
LENGTH_DEADBAND = 1.0
# Model re-estimation rounds on the winning run after each RANSAC round.
REFIT_ROUNDS = 2
# Breakpoints this close to an endpoint degenerate into a single piece.
TBREAK_MARGIN = 0.02


class TrajFitError(RuntimeError):
    pass


class NoSalientSegment(TrajFitError):
    """No segment of sufficient saliency was found in the kernel."""


@dataclass(frozen=True)
class PsfPointSet:
    """Blur kernel as a point cloud: pixel coordinates with intensities."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise TrajFitError(f"points must be (n, 2), got {pts.shape}")
        if w.shape != (pts.shape[0],):
            raise TrajFitError("one weight per point required")
        if not np.all(np.isfinite(pts)):
            raise TrajFitError("non-finite point coordinates")
        if pts.shape[0] and (not np.all(np.isfinite(w)) or w.min() <= 0):
            raise TrajFitError("weights must be positive and finite")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_psf(cls, psf, rel_threshold=1e-3):
        x, y, w = psf.point_set(rel_threshold)
        return cls(np.stack([x, y], axis=1), w)

    def __len__(self):
        return self.points.shape[0]

    @property
    def total_weight(self):
        return float(self.weights.sum())


@dataclass(frozen=True)
class FitParams:
    """Knobs of the trajectory fit.

    ``saliency_min`` is a fraction of the total point-set weight; a RANSAC
    round keeps its winner only if the run's weight exceeds that fraction.
    ``ransac_iters`` counts line samples per round; parabola rounds draw
    twice as many. ``join_dist`` bounds how far a pair intersection may sit
    from both segments to form a two-piece candidate (callers tracking an
    object of known size typically pass 1.5x its diameter). ``tau`` is the
    relative-error bound of the consistency check.
    """

    inlier_dist: float = 2.0
    length_weight: float = 0.25
    saliency_min: float = 0.05
    gap_max: float = 2.0
    ransac_iters: int = 500
    tau: float = 0.6
    join_dist: float = 15.0
    seed: int = 0

    def __post_init__(self):
        positive = {
            "inlier_dist": self.inlier_dist,
            "length_weight": self.length_weight,
            "saliency_min": self.saliency_min,
            "gap_max": self.gap_max,
            "ransac_iters": self.ransac_iters,
            "tau": self.tau,
            "join_dist": self.join_dist,
        }
        for name, value in positive.items():
            if not np.isfinite(value) or value <= 0:
                raise TrajFitError(f"{name} must be positive, got {value}")
        if self.seed < 0:
            raise TrajFitError("seed must be nonnegative")


@dataclass(frozen=True)
class Segment:
    """One salient run found by RANSAC.

    ``curve`` traces the run as a single-piece curve over t in [0, 1];
    ``model`` keeps the underlying infinite line (base point, unit
    direction) or implicit parabola (axis, coefficients, run interval) for
    pair assembly; ``inliers`` indexes the source point set.
    """

    kind: str
    curve: PiecewiseCurve
    model: tuple
    inliers: np.ndarray
    saliency: float


@dataclass
class RefineResult:
    """Outcome of curve refinement.

    ``refined`` is False when every point sat farther than the inlier
    distance from the initial curve and the input was returned untouched.
    ``surrogate_trace`` holds, per correspondence update, the smoothed
    robust objective after each reweighting pass.
    """

    curve: PiecewiseCurve
    refined: bool
    surrogate_trace: list = field(default_factory=list)


def _split_runs(order, positions, weights, gap_max):
    """Most salient run of consecutive points along a 1-D ordering.

    ``order`` indexes into the candidate set, ``positions`` are the sorted
    1-D coordinates (same order), ``weights`` aligned with ``order``.
    Returns (indices of the winning run, its saliency).
    """
    if order.size == 0:
        return order, 0.0
    gaps = np.diff(positions)
    cut = np.nonzero(gaps > gap_max)[0] + 1
    blocks = np.split(np.arange(order.size), cut)
    saliencies = [weights[b].sum() for b in blocks]
    best = int(np.argmax(saliencies))
    return order[blocks[best]], float(saliencies[best])


def _weighted_line(points, weights):
    """Total-least-squares line through weighted points: (base, unit dir)."""
    wsum = weights.sum()
    base = (points * weights[:, None]).sum(axis=0) / wsum
    centered = points - base
    cov = (centered * weights[:, None]).T @ centered / wsum
    eigvals, eigvecs = np.linalg.eigh(cov)
    direction = eigvecs[:, np.argmax(eigvals)]
    return base, direction


def _line_run(ppts, pw, base, d, params):
    """Most salient consecutive run of line inliers: (run, saliency)."""
    normal = np.array([-d[1], d[0]])
    offs = ppts - base
    dist = np.abs(offs @ normal)
    inl = np.nonzero(dist < params.inlier_dist)[0]
    if inl.size < 2:
        return None, 0.0
    s = offs[inl] @ d
    order = np.argsort(s)
    return _split_runs(inl[order], s[order], pw[inl[order]], params.gap_max)


def find_linear_segments(points, params):
    """Sequential RANSAC for salient line segments.

    Per round: sample two points, gather inliers of their line, keep the
    most salient consecutive run (neighbor gaps along the line bounded by
    ``gap_max``), re-estimate the line on that run, and remove the winner's
    points from the pool. Stops when the best run's saliency falls below
    ``saliency_min`` times the total weight or the pool runs dry.
    """
    pts = points.points
    w = points.weights
    if len(points) == 0:
        return []
    rng = np.random.default_rng(params.seed)
    sal_floor = params.saliency_min * points.total_weight
    pool = np.arange(len(points))
    segments = []
    while pool.size >= 2:
        ppts = pts[pool]
        pw = w[pool]
        best_run, best_sal = None, 0.0
        for _ in range(params.ransac_iters):
            i, j = rng.choice(pool.size, size=2, replace=False)
            delta = ppts[j] - ppts[i]
            norm = np.hypot(*delta)
            if norm < 1e-12:
                continue
            run, sal = _line_run(ppts, pw, ppts[i], delta / norm, params)
            if sal > best_sal:
                best_run, best_sal = run, sal
        if best_run is None or best_sal < sal_floor:
            break
        base, d = _weighted_line(ppts[best_run], pw[best_run])
        for _ in range(REFIT_ROUNDS):
            run, sal = _line_run(ppts, pw, base, d, params)
            if run is None or sal < best_sal:
                break
            best_run, best_sal = run, sal
            base, d = _weighted_line(ppts[best_run], pw[best_run])
        run_pts = ppts[best_run]
        s = (run_pts - base) @ d
        p0 = base + s.min() * d
        p1 = base + s.max() * d
        segments.append(Segment(
            kind="line",
            curve=PiecewiseCurve.from_line(p0, p1),
            model=(base, d),
            inliers=pool[best_run],
            saliency=best_sal,
        ))
        keep = np.ones(pool.size, dtype=bool)
        keep[best_run] = False
        pool = pool[keep]
    segments.sort(key=lambda seg: -seg.saliency)
    return segments


def _fit_parabola(u, v, weights=None):
    """Least-squares v = a + b u + c u**2, or None when u is degenerate."""
    design = np.stack([np.ones_like(u), u, u * u], axis=1)
    rhs = v
    if weights is not None:
        root = np.sqrt(weights)
        design = design * root[:, None]
        rhs = v * root
    coef, _, rank, _ = np.linalg.lstsq(design, rhs, rcond=None)
    if rank < 3:
        return None
    return coef


def _real_cubic_roots(a3, a2, a1, a0):
    """Real roots of a3 x^3 + a2 x^2 + a1 x + a0 per entry of a1, a0.

    The leading coefficients a3 != 0 and a2 are scalars shared by all
    entries. Returns an (n, 3) array; entries with a single real root
    repeat it.
    """
    a1 = np.asarray(a1, dtype=np.float64)
    a0 = np.asarray(a0, dtype=np.float64)
    # Depressed form s^3 + p s + q with x = s - a2 / (3 a3).
    shift = a2 / (3.0 * a3)
    p = a1 / a3 - 3.0 * shift * shift
    q = 2.0 * shift ** 3 - shift * a1 / a3 + a0 / a3
    disc = 0.25 * q * q + p ** 3 / 27.0
    roots = np.empty(a1.shape + (3,))
    single = disc > 0
    if np.any(single):
        sq = np.sqrt(disc[single])
        s = np.cbrt(-0.5 * q[single] + sq) + np.cbrt(-0.5 * q[single] - sq)
        roots[single] = s[:, None]
    triple = ~single
    if np.any(triple):
        pt = np.minimum(p[triple], -1e-30)
        qt = q[triple]
        m = 2.0 * np.sqrt(-pt / 3.0)
        arg = np.clip(3.0 * qt / (pt * m), -1.0, 1.0)
        theta = np.arccos(arg) / 3.0
        k = np.arange(3) * (2.0 * np.pi / 3.0)
        roots[triple] = m[:, None] * np.cos(theta[:, None] - k[None, :])
    return roots - shift


def _parabola_project(coef, u0, v0):
    """Foot-point u of the orthogonal projection onto v = a + b u + c u**2.

    Solves the stationarity cubic (u - u0) + q'(u) (q(u) - v0) = 0 for each
    point in closed form, then keeps the root of least distance.
    """
    a, b, c = coef
    if abs(c) < 1e-8:
        # Effectively a line v = a + b u.
        u_foot = (u0 + b * (v0 - a)) / (1.0 + b * b)
        return u_foot
    cand = _real_cubic_roots(2.0 * c * c, 3.0 * b * c,
                             b * b + 2.0 * c * (a - v0) + 1.0,
                             b * (a - v0) - u0)
    dist2 = (cand - u0[:, None]) ** 2 \
        + (a + b * cand + c * cand * cand - v0[:, None]) ** 2
    return cand[np.arange(cand.shape[0]), np.argmin(dist2, axis=1)]


def _parabola_arclen(coef, u):
    """Arc length along v = a + b u + c u**2 measured from u = 0."""
    _, b, c = coef
    if abs(c) < 1e-8:
        return u * np.hypot(1.0, b)
    z = b + 2.0 * c * u
    return (z * np.sqrt(1.0 + z * z) + np.arcsinh(z)) / (4.0 * c)


def _parabola_arc_curve(axis, coef, u_lo, u_hi):
    """Single-piece curve tracing the parabola between foot coordinates."""
    a, b, c = coef
    du = u_hi - u_lo
    uc = np.array([u_lo, du, 0.0])
    vc = np.array([a + b * u_lo + c * u_lo * u_lo,
                   b * du + 2.0 * c * u_lo * du,
                   c * du * du])
    if axis == 0:
        piece = np.stack([uc, vc], axis=1)
    else:
        piece = np.stack([vc, uc], axis=1)
    return PiecewiseCurve((piece,))


def _parabola_run(ppts, pw, coef, axis, params):
    """Most salient arc-length-consecutive run: (run, saliency, foot points)."""
    foot = _parabola_project(coef, ppts[:, axis], ppts[:, 1 - axis])
    fv = coef[0] + coef[1] * foot + coef[2] * foot * foot
    dist = np.hypot(ppts[:, axis] - foot, ppts[:, 1 - axis] - fv)
    inl = np.nonzero(dist < params.inlier_dist)[0]
    if inl.size < 4:
        return None, 0.0, None
    arclen = _parabola_arclen(coef, foot[inl])
    order = np.argsort(arclen)
    run, sal = _split_runs(inl[order], arclen[order], pw[inl[order]],
                           params.gap_max)
    return run, sal, foot[run]


def find_parabolic_segments(points, params):
    """Sequential RANSAC for salient parabolic arcs.

    Each four-point sample is fit by the two axis-aligned parabola families
    (v as a quadratic in u for u = x and u = y). Point distances and foot
    points come from true orthogonal projection, and the consecutive-run
    test orders inliers by arc length along the parabola. The winning run
    re-estimates its parabola by weighted least squares before the round
    closes.
    """
    pts = points.points
    w = points.weights
    if len(points) < 4:
        return []
    rng = np.random.default_rng(params.seed + 1)
    sal_floor = params.saliency_min * points.total_weight
    pool = np.arange(len(points))
    segments = []
    while pool.size >= 4:
        ppts = pts[pool]
        pw = w[pool]
        best = None
        best_sal = 0.0
        for _ in range(2 * params.ransac_iters):
            sample = rng.choice(pool.size, size=4, replace=False)
            for axis in (0, 1):
                coef = _fit_parabola(ppts[sample, axis], ppts[sample, 1 - axis])
                if coef is None:
                    continue
                run, sal, foot = _parabola_run(ppts, pw, coef, axis, params)
                if sal > best_sal:
                    best = (coef, axis, run, foot)
                    best_sal = sal
        if best is None or best_sal < sal_floor:
            break
        coef, axis, run, run_foot = best
        for _ in range(REFIT_ROUNDS):
            refit = _fit_parabola(ppts[run, axis], ppts[run, 1 - axis],
                                  weights=pw[run])
            if refit is None:
                break
            new_run, sal, foot = _parabola_run(ppts, pw, refit, axis, params)
            if new_run is None or sal < best_sal:
                break
            coef, run, run_foot, best_sal = refit, new_run, foot, sal
        segments.append(Segment(
            kind="parabola",
            curve=_parabola_arc_curve(axis, coef, run_foot.min(),
                                      run_foot.max()),
            model=(axis, coef, float(run_foot.min()), float(run_foot.max())),
            inliers=pool[run],
            saliency=best_sal,
        ))
        keep = np.ones(pool.size, dtype=bool)
        keep[run] = False
        pool = pool[keep]
    segments.sort(key=lambda seg: -seg.saliency)
    return segments


def _segment_point_distance(segment, point):
    """Distance from a point to the finite segment (dense curve samples)."""
    samples = segment.curve.sample(256)
    return float(np.min(np.hypot(*(samples - point).T)))


def _line_pair_intersection(seg_a, seg_b):
    base_a, dir_a = seg_a.model
    base_b, dir_b = seg_b.model
    mat = np.stack([dir_a, -dir_b], axis=1)
    det = np.linalg.det(mat)
    if abs(det) < 1e-9:
        return None
    ta, _ = np.linalg.solve(mat, base_b - base_a)
    return base_a + ta * dir_a


def _parabola_pair_intersections(seg_a, seg_b):
    """Real intersection points of two implicit parabolas."""
    axis_a, coef_a, _, _ = seg_a.model
    axis_b, coef_b, _, _ = seg_b.model
    out = []
    if axis_a == axis_b:
        diff = np.array(coef_a) - np.array(coef_b)
        roots = np.roots(diff[::-1]) if np.any(np.abs(diff) > 1e-12) else []
        for r in roots:
            if abs(r.imag) > 1e-8:
                continue
            u = float(r.real)
            v = coef_a[0] + coef_a[1] * u + coef_a[2] * u * u
            out.append((u, v) if axis_a == 0 else (v, u))
    else:
        # v = qa(u) and u = qb(v): substitute into a quartic in u.
        qa = np.polynomial.Polynomial(list(coef_a))
        qb = np.polynomial.Polynomial(list(coef_b))
        quartic = (qb(qa) - np.polynomial.Polynomial([0.0, 1.0])).trim(1e-12)
        roots = quartic.roots() if quartic.degree() >= 1 else []
        for r in roots:
            if abs(r.imag) > 1e-8:
                continue
            u = float(r.real)
            v = float(qa(u))
            out.append((u, v) if axis_a == 0 else (v, u))
    return [np.array(p) for p in out]


def _endpoint_coeffs(curve):
    """Coefficients (c0, c1, c2) of a single-piece curve, each a 2-vector."""
    piece = curve.pieces[0]
    return piece[0], piece[1], piece[2]


def _oriented_half(segment, joint):
    """Single-piece curve tracing the segment from its far end to ``joint``.

    The traced path follows the segment's own geometry; its endpoint nearest
    the joint is replaced by the joint's foot on the underlying model so the
    two halves meet exactly.
    """
    if segment.kind == "line":
        base, d = segment.model
        ends = segment.curve.evaluate(np.array([0.0, 1.0]))
        far = ends[np.argmax(np.hypot(*(ends - joint).T))]
        s_far = float((far - base) @ d)
        s_joint = float((joint - base) @ d)
        curve = PiecewiseCurve.from_line(base + s_far * d, base + s_joint * d)
        length = abs(s_joint - s_far)
        return curve, length
    axis, coef, u_lo, u_hi = segment.model
    u_joint = float(_parabola_project(coef, np.array([joint[axis]]),
                                      np.array([joint[1 - axis]]))[0])
    u_far = u_lo if abs(u_joint - u_lo) > abs(u_joint - u_hi) else u_hi
    curve = _parabola_arc_curve(axis, coef, u_far, u_joint)
    length = abs(_parabola_arclen(coef, u_joint) - _parabola_arclen(coef, u_far))
    return curve, float(length)


def _join_pair(seg_a, seg_b, joint):
    """Two-piece candidate through ``joint`` with an arc-length breakpoint."""
    half_a, len_a = _oriented_half(seg_a, joint)
    half_b, len_b = _oriented_half(seg_b, joint)
    total = len_a + len_b
    if total < 1e-9:
        return None
    tbreak = len_a / total
    if not TBREAK_MARGIN < tbreak < 1.0 - TBREAK_MARGIN:
        return None
    c0a, c1a, c2a = _endpoint_coeffs(half_a)
    # Both halves trace far-end -> joint; the second piece must leave the
    # joint, so flip it before substitution.
    c0b, c1b, c2b = _endpoint_coeffs(half_b.reversed())
    # Half A runs over t in [0, tbreak] (substitute t' = 1 + s / tbreak),
    # half B over [tbreak, 1] (t' = s / (1 - tbreak)).
    piece_a = ((c1a + 2.0 * c2a) / tbreak, c2a / tbreak ** 2)
    piece_b = (c1b / (1.0 - tbreak), c2b / (1.0 - tbreak) ** 2)
    meet = 0.5 * (c0a + c1a + c2a + c0b)
    return PiecewiseCurve.from_breakpoint_form(meet, [piece_a, piece_b],
                                               tbreak)


def assemble_candidates(m1, m2, params):
    """Candidate curves: all single segments plus joined pairs.

    A pair of lines (or parabolas) is joined when an intersection of their
    underlying models lies within ``join_dist`` of both finite segments;
    the two-piece candidate then places its breakpoint at the junction,
    proportionally to the arc-length split.
    """
    candidates = [seg.curve for seg in m1] + [seg.curve for seg in m2]
    for family, intersect in ((m1, lambda a, b: _line_pair_intersection(a, b)),
                              (m2, _parabola_pair_intersections)):
        for i in range(len(family)):
            for j in range(i + 1, len(family)):
                points = intersect(family[i], family[j])
                if points is None:
                    continue
                if isinstance(points, np.ndarray):
                    points = [points]
                best, best_d = None, np.inf
                for p in points:
                    d = max(_segment_point_distance(family[i], p),
                            _segment_point_distance(family[j], p))
                    if d < best_d:
                        best, best_d = p, d
                if best is None or best_d > params.join_dist:
                    continue
                joined = _join_pair(family[i], family[j], best)
                if joined is not None:
                    candidates.append(joined)
    return candidates


def _closest_params(curve, pts):
    """Per-point parameter of the nearest curve point, solved exactly.

    The squared distance to a quadratic piece is a quartic in t, so its
    interior minima satisfy a cubic; the candidates are those roots clamped
    to the piece's interval plus the interval endpoints.
    """
    if curve.n_pieces == 1:
        intervals = [(0.0, 1.0)]
    else:
        intervals = [(0.0, curve.tbreak), (curve.tbreak, 1.0)]
    n = pts.shape[0]
    candidates = []
    for piece, (lo, hi) in zip(curve.pieces, intervals):
        c0, c1, c2 = piece
        r0 = pts - c0
        a3 = 2.0 * float(c2 @ c2)
        a2 = 3.0 * float(c1 @ c2)
        a1 = float(c1 @ c1) - 2.0 * (r0 @ c2)
        a0 = -(r0 @ c1)
        if a3 > 1e-12:
            roots = _real_cubic_roots(a3, a2, a1, a0)
        else:
            speed2 = float(c1 @ c1)
            if speed2 < 1e-12:
                roots = np.full((n, 1), lo)
            else:
                roots = ((r0 @ c1) / speed2)[:, None]
        candidates.append(np.clip(roots, lo, hi))
        candidates.append(np.full((n, 1), lo))
        candidates.append(np.full((n, 1), hi))
    ts = np.concatenate(candidates, axis=1)
    d2 = ((curve.evaluate(ts) - pts[:, None, :]) ** 2).sum(axis=2)
    return ts[np.arange(n), np.argmin(d2, axis=1)]


def _design_rows(ts, tbreak, n_pieces):
    """Rows of the linear system mapping curve parameters to points.

    Two-piece curves use the shared-joint basis (joint, a1, a2 per piece,
    s = t - tbreak); single pieces use plain polynomial coefficients.
    """
    ts = np.asarray(ts)
    if n_pieces == 1:
        return np.stack([np.ones_like(ts), ts, ts * ts], axis=1)
    s = ts - tbreak
    first = ts <= tbreak
    rows = np.zeros((ts.size, 5))
    rows[:, 0] = 1.0
    rows[first, 1] = s[first]
    rows[first, 2] = s[first] ** 2
    rows[~first, 3] = s[~first]
    rows[~first, 4] = s[~first] ** 2
    return rows


def _curve_from_theta(theta, tbreak, n_pieces):
    if n_pieces == 1:
        return PiecewiseCurve((theta,))
    return PiecewiseCurve.from_breakpoint_form(
        theta[0], [(theta[1], theta[2]), (theta[3], theta[4])], tbreak)


def _theta_from_curve(curve):
    if curve.n_pieces == 1:
        return np.array(curve.pieces[0])
    tb = curve.tbreak
    theta = np.empty((5, 2))
    theta[0] = curve.evaluate(tb)
    for p, (c0, c1, c2) in enumerate(curve.pieces):
        theta[1 + 2 * p] = c1 + 2.0 * c2 * tb
        theta[2 + 2 * p] = c2
    return theta


def _smoothed_norms(resid):
    return np.sqrt((resid ** 2).sum(axis=1) + DIST_SMOOTH ** 2)


def _irls_solve(design, targets, coefs, theta0):
    """Robust weighted least squares by iterative reweighting.

    Minimizes sum_i coefs_i * sqrt(||targets_i - design_i theta||^2 + d^2)
    by quadratic majorization; the returned trace of objective values is
    non-increasing.
    """
    theta = theta0
    trace = []
    for _ in range(IRLS_MAX_PASSES):
        resid = targets - design @ theta
        norms = _smoothed_norms(resid)
        trace.append(float((coefs * norms).sum()))
        if len(trace) > 1 and trace[-2] - trace[-1] < IRLS_OBJ_TOL:
            break
        u = coefs / (2.0 * norms)
        aw = design * u[:, None]
        gram = design.T @ aw
        # Tiny ridge toward the current iterate keeps the solve well posed
        # without breaking the majorize-minimize descent guarantee.
        ridge = 1e-12 * max(float(np.trace(gram)), 1.0)
        gram[np.diag_indices_from(gram)] += ridge
        theta = np.linalg.solve(gram, aw.T @ targets + ridge * theta)
    return theta, trace


def refine_curve(curve, points, params):
    """Polish a candidate curve against the weighted point cloud.

    Alternates closest-point correspondence with a robust least-squares
    solve of the inlier attraction term plus a length penalty (curve points
    pulled toward their nearest data point on a fixed parameter grid). The
    breakpoint of a two-piece curve stays fixed; continuity is structural
    in the shared-joint parametrization.
    """
    pts = points.points
    w = points.weights
    if len(points) == 0:
        return RefineResult(curve, refined=False)
    n_pieces = curve.n_pieces
    tbreak = curve.tbreak
    theta = _theta_from_curve(curve)
    t_grid = np.linspace(0.0, 1.0, LENGTH_GRID)
    grid_coef = np.full(LENGTH_GRID, params.length_weight / LENGTH_GRID)
    grid_design = _design_rows(t_grid, tbreak, n_pieces)
    trace = []
    current = curve
    for iteration in range(ICP_MAX_ITERS):
        t_i = _closest_params(current, pts)
        resid = pts - current.evaluate(t_i)
        dist = np.hypot(resid[:, 0], resid[:, 1])
        inliers = dist < params.inlier_dist
        if not np.any(inliers):
            if iteration == 0:
                return RefineResult(curve, refined=False)
            break
        grid_pts = current.evaluate(t_grid)
        d2 = ((grid_pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        nearest_idx = np.argmin(d2, axis=1)
        grid_active = np.sqrt(d2[np.arange(LENGTH_GRID), nearest_idx]) \
            > LENGTH_DEADBAND
        nearest = pts[nearest_idx[grid_active]]
        design = np.concatenate(
            [_design_rows(t_i[inliers], tbreak, n_pieces),
             grid_design[grid_active]])
        targets = np.concatenate([pts[inliers], nearest])
        coefs = np.concatenate([w[inliers], grid_coef[grid_active]])
        theta_new, obj = _irls_solve(design, targets, coefs, theta)
        trace.append(obj)
        change = float(np.abs(theta_new - theta).max())
        theta = theta_new
        current = _curve_from_theta(theta, tbreak, n_pieces)
        if change < ICP_PARAM_TOL:
            break
    return RefineResult(current, refined=True, surrogate_trace=trace)


def curve_psf_error(curve, psf):
    """Relative L2 error between a curve's rasterization and a kernel.

    The curve is rasterized at the kernel's total mass; both rasters are
    compared on their common bounding box in frame coordinates.
    """
    x1 = psf.offset[0] + psf.width
    y1 = psf.offset[1] + psf.height
    xmin, ymin, xmax, ymax = curve.bounds()
    frame = (int(max(x1, np.ceil(xmax) + 2)), int(max(y1, np.ceil(ymax) + 2)))
    try:
        raster = formation.rasterize_curve(curve, frame, psf.total_mass)
    except formation.FormationError:
        return np.inf
    ox = min(psf.offset[0], raster.offset[0])
    oy = min(psf.offset[1], raster.offset[1])
    w = max(x1, raster.offset[0] + raster.width) - ox
    h = max(y1, raster.offset[1] + raster.height) - oy
    diff = np.zeros((h, w))
    sy = psf.offset[1] - oy
    sx = psf.offset[0] - ox
    diff[sy:sy + psf.height, sx:sx + psf.width] = psf.weights
    ry = raster.offset[1] - oy
    rx = raster.offset[0] - ox
    diff[ry:ry + raster.height, rx:rx + raster.width] -= raster.weights
    denom = float(np.linalg.norm(psf.weights))
    if denom == 0.0:
        raise TrajFitError("cannot score against an all-zero kernel")
    return float(np.linalg.norm(diff) / denom)


def fit_trajectory(psf, params=None):
    """Best piecewise-quadratic trajectory explaining a blur kernel.

    Runs the segment searches, assembles single and joined candidates,
    refines each, and returns the curve whose rasterization is closest to
    the kernel together with that relative error.
    """
    if params is None:
        params = FitParams()
    points = PsfPointSet.from_psf(psf)
    if len(points) == 0:
        raise NoSalientSegment("kernel has no mass above threshold")
    m1 = find_linear_segments(points, params)
    m2 = find_parabolic_segments(points, params)
    if not m1 and not m2:
        raise NoSalientSegment("no segment reached the saliency floor")
    best_curve, best_err = None, np.inf
    for candidate in assemble_candidates(m1, m2, params):
        refined = refine_curve(candidate, points, params)
        err = curve_psf_error(refined.curve, psf)
        if err < best_err:
            best_curve, best_err = refined.curve, err
    if best_curve is None:
        raise NoSalientSegment("no candidate produced a finite fit")
    return best_curve, best_err


def consistency_check(fit_error, params):
    """Whether a fit error passes the relative-error acceptance test."""
    return bool(fit_error < params.tau)


def evaluate_curve(curve, t):
    """Curve point at parameter t; values outside [0, 1] extrapolate."""
    return curve.evaluate(np.asarray(t, dtype=np.float64))
