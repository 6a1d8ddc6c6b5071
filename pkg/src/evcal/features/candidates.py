"""Ellipse candidates from pairs of opposite-polarity arc regions."""

from dataclasses import dataclass

import numpy as np

from . import conic


@dataclass(eq=False)
class EllipseCandidate:
    region_pos: object
    region_neg: object
    coeffs: np.ndarray
    center: np.ndarray
    axes: tuple  # (major, minor) semi-axes in pixels
    orientation: float
    e_fit: float
    theta_r: tuple  # angular range (degrees) of the positive and negative region
    similarity: float

    @property
    def xs(self):
        return np.concatenate([self.region_pos.xs, self.region_neg.xs])

    @property
    def ys(self):
        return np.concatenate([self.region_pos.ys, self.region_neg.ys])

    def normalized_radius(self, x, y):
        """Elliptical radius of points, 1 on the fitted curve."""
        k = -conic.evaluate(self.coeffs, self.center[0], self.center[1])
        q = conic.evaluate(self.coeffs, x, y) + k
        return np.sqrt(np.maximum(q, 0.0) / k)


def _evaluate_pair(a, b, t_fit, sim_min, theta_tol, max_axis):
    xs = np.concatenate([a.xs, b.xs]).astype(float)
    ys = np.concatenate([a.ys, b.ys]).astype(float)
    c, err = conic.fit_conic(xs, ys)
    if not np.isfinite(err) or err > t_fit:
        return None
    c = conic.normalize(c)
    if not conic.is_ellipse(c):
        return None
    sim = min(a.pc1_mag, b.pc1_mag) / max(a.pc1_mag, b.pc1_mag)
    if sim <= sim_min:
        return None
    ctr = conic.center(c)
    th_a = conic.angular_range(ctr[0], ctr[1], a.xs, a.ys)
    th_b = conic.angular_range(ctr[0], ctr[1], b.xs, b.ys)
    if abs(th_a - 180.0) > theta_tol or abs(th_b - 180.0) > theta_tol:
        return None
    major, minor, ang = conic.axes(c)
    if not (minor > 1.0 and major < max_axis):
        return None
    pos, neg = (a, b) if a.polarity > 0 else (b, a)
    th = (th_a, th_b) if a.polarity > 0 else (th_b, th_a)
    return EllipseCandidate(pos, neg, c, ctr, (major, minor), ang, err, th, sim)


def extract_candidates(
    regions,
    t_fit=1.2,
    sim_min=0.6,
    theta_tol=60.0,
    pair_dist_factor=1.5,
    max_axis=200.0,
):
    """Pair opposite-polarity regions and keep geometrically valid ellipses.

    Pairs are evaluated in order of increasing fit error and each region is
    used at most once. Candidates whose center falls inside a larger
    accepted candidate (for example the inner crosspoint structure of a
    feature) are discarded.
    """
    pos = [r for r in regions if r.polarity > 0]
    neg = [r for r in regions if r.polarity < 0]
    found = []
    for a in pos:
        for b in neg:
            dist = np.linalg.norm(a.centroid - b.centroid)
            if dist >= pair_dist_factor * (a.pc1_mag + b.pc1_mag):
                continue
            try:
                cand = _evaluate_pair(a, b, t_fit, sim_min, theta_tol, max_axis)
            except (np.linalg.LinAlgError, ValueError, FloatingPointError):
                cand = None
            if cand is not None:
                found.append(cand)
    found.sort(key=lambda c: c.e_fit)
    used = set()
    chosen = []
    for cand in found:
        key_p, key_n = id(cand.region_pos), id(cand.region_neg)
        if key_p in used or key_n in used:
            continue
        used.update((key_p, key_n))
        chosen.append(cand)
    # drop candidates nested inside a larger one
    out = []
    for cand in chosen:
        nested = any(
            other is not cand
            and other.axes[1] > cand.axes[1]
            and other.normalized_radius(*cand.center) < 1.0
            for other in chosen
        )
        if not nested:
            out.append(cand)
    return out
