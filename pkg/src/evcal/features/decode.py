"""Assign grid ids to ellipse candidates and resolve the pattern orientation.

Centers are ordered by growing a lattice from nearest-neighbour steps and
refining it with a lattice-to-image homography. The remaining 4-fold
ambiguity (the lattice may be the pattern rotated by 0, 90, 180 or 270
degrees) is resolved from the crosspoints inside each feature: while the
pattern moves, the two lines of a crosspoint emit events whose polarity
layout depends on which quadrants are black.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import RecognitionFailed
from ..homography import apply_homography, fit_homography

ROTATIONS = (0, 90, 180, 270)


@dataclass
class DecodeResult:
    ids: np.ndarray  # grid id per candidate, -1 where unassigned
    rotation: int  # rotation (degrees) of the image lattice relative to the pattern
    score: float  # orientation vote margin
    lattice_to_image: np.ndarray


def _nn_steps(centers):
    d = centers[None, :, :] - centers[:, None, :]
    dist = np.linalg.norm(d, axis=2)
    np.fill_diagonal(dist, np.inf)
    steps = []
    for k in range(len(centers)):
        order = np.argsort(dist[k])[:4]
        near = dist[k, order[0]]
        for o in order:
            if dist[k, o] < 1.3 * near:
                steps.append(d[k, o])
    return np.array(steps)


def _lattice_axes(centers):
    """Two lattice step vectors; the first roughly along image x."""
    steps = _nn_steps(centers)
    if len(steps) < 4:
        raise RecognitionFailed("too few neighbouring features to find the lattice")
    ang2 = 2.0 * np.arctan2(steps[:, 1], steps[:, 0])
    z = np.stack([np.cos(ang2), np.sin(ang2)], axis=1)
    # two clusters in doubled-angle space, seeded by the most opposed pair
    c0 = z[0]
    c1 = z[np.argmin(z @ c0)]
    for _ in range(10):
        lab = (z @ c1) > (z @ c0)
        if lab.all() or (~lab).all():
            raise RecognitionFailed("features do not form a two-dimensional lattice")
        c0 = z[~lab].mean(axis=0)
        c1 = z[lab].mean(axis=0)
    axes = []
    for mask in (~lab, lab):
        v = steps[mask]
        ref = v[0]
        v = np.where((v @ ref)[:, None] < 0, -v, v)
        axes.append(np.median(v, axis=0))
    a1, a2 = axes
    if abs(a2[0]) * np.linalg.norm(a1) > abs(a1[0]) * np.linalg.norm(a2):
        a1, a2 = a2, a1
    if a1[0] < 0:
        a1 = -a1
    if a1[0] * a2[1] - a1[1] * a2[0] < 0:
        a2 = -a2
    return a1, a2


def _grow(centers, a1, a2, tol=0.3):
    n = len(centers)
    coords = np.full((n, 2), np.iinfo(np.int64).min, dtype=np.int64)
    seed = int(np.argmin(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    coords[seed] = (0, 0)
    local = {seed: (a1, a2)}
    queue = [seed]
    assigned = {(0, 0): seed}
    while queue:
        k = queue.pop(0)
        b1, b2 = local[k]
        for step, (di, dj) in ((b1, (1, 0)), (-b1, (-1, 0)), (b2, (0, 1)), (-b2, (0, -1))):
            key = (int(coords[k, 0] + di), int(coords[k, 1] + dj))
            if key in assigned:
                continue
            pred = centers[k] + step
            dist = np.linalg.norm(centers - pred, axis=1)
            o = int(np.argmin(dist))
            if dist[o] > tol * np.linalg.norm(step) or coords[o, 0] != np.iinfo(np.int64).min:
                continue
            coords[o] = key
            assigned[key] = o
            actual = centers[o] - centers[k]
            if di:
                local[o] = (actual * di, b2)
            else:
                local[o] = (b1, actual * dj)
            queue.append(o)
    ok = coords[:, 0] != np.iinfo(np.int64).min
    return coords, ok


def _reassign(centers, H, lo, hi, tol=0.3):
    ii, jj = np.meshgrid(np.arange(lo[0] - 1, hi[0] + 2), np.arange(lo[1] - 1, hi[1] + 2), indexing="ij")
    lat = np.stack([ii.ravel(), jj.ravel()], axis=1)
    pred = apply_homography(H, lat.astype(float))
    # local spacing at each predicted node
    right = apply_homography(H, lat + np.array([1.0, 0.0]))
    down = apply_homography(H, lat + np.array([0.0, 1.0]))
    spacing = np.minimum(np.linalg.norm(right - pred, axis=1), np.linalg.norm(down - pred, axis=1))
    dist = np.linalg.norm(centers[:, None, :] - pred[None, :, :], axis=2)
    best = np.argmin(dist, axis=1)
    ok = dist[np.arange(len(centers)), best] < tol * spacing[best]
    coords = lat[best]
    # a lattice node may hold one center only
    _, inv, counts = np.unique(best[ok], return_inverse=True, return_counts=True)
    if np.any(counts > 1):
        raise RecognitionFailed("two features map to the same grid position")
    return coords, ok


def crosspoint_signature(candidate, events, jac_inv, inner_ratio):
    """Polarity moment of crosspoint events in lattice-aligned coordinates.

    Positive when the black quadrants lie towards lattice (-,-) and (+,+)
    for the observed motion. Returns ``(value, event_count)``.
    """
    x = events.x.astype(float)
    y = events.y.astype(float)
    box = candidate.axes[0] + 1.0
    near = (np.abs(x - candidate.center[0]) < box) & (np.abs(y - candidate.center[1]) < box)
    if not np.any(near):
        return 0.0, 0
    x, y, p = x[near], y[near], events.p[near].astype(float)
    rad = candidate.normalized_radius(x, y)
    inner = rad < 0.7 * inner_ratio
    if np.count_nonzero(inner) < 4:
        return 0.0, 0
    off = np.stack([x[inner] - candidate.center[0], y[inner] - candidate.center[1]], axis=1) @ jac_inv.T
    # the leading edge of a dark disk darkens pixels, so negative events lead
    motion = candidate.region_neg.centroid - candidate.region_pos.centroid
    v = jac_inv @ motion
    m, n = off[:, 0], off[:, 1]
    s = np.sum(p[inner] * (n * v[0] + m * v[1]))
    return float(s), int(np.count_nonzero(inner))


def _hypothesis_ids(ij, rotation, rows, cols):
    i, j = ij[:, 0], ij[:, 1]
    if rotation == 0:
        return j, i
    if rotation == 180:
        return rows - 1 - j, cols - 1 - i
    if rotation == 90:
        return i, cols - 1 - j
    return rows - 1 - i, j


def _homography_jacobian(H, pt):
    h = H @ np.array([pt[0], pt[1], 1.0])
    w = h[2]
    return np.array(
        [
            [(H[0, 0] * w - h[0] * H[2, 0]) / w**2, (H[0, 1] * w - h[0] * H[2, 1]) / w**2],
            [(H[1, 0] * w - h[1] * H[2, 0]) / w**2, (H[1, 1] * w - h[1] * H[2, 1]) / w**2],
        ]
    )


def decode_pattern(candidates, pattern, events, min_features=None):
    """Map candidates to grid ids.

    Parameters
    ----------
    candidates : list of EllipseCandidate
    pattern : PatternGeometry
    events : EventStream
        Events of the accumulation window (used for the orientation vote).
    min_features : int, optional
        Minimum number of decoded features, default ``rows * cols - 2``.

    Raises
    ------
    RecognitionFailed
        On too few candidates, an inconsistent lattice or an undecidable
        orientation.
    """
    rows, cols = pattern.rows, pattern.cols
    if min_features is None:
        min_features = rows * cols - 2
    if len(candidates) < max(min_features, 4):
        raise RecognitionFailed(f"{len(candidates)} candidates, need {min_features}")
    centers = np.array([c.center for c in candidates])
    a1, a2 = _lattice_axes(centers)
    coords, ok = _grow(centers, a1, a2)
    if np.count_nonzero(ok) < 4:
        raise RecognitionFailed("lattice growth found fewer than 4 features")
    for _ in range(2):
        H = fit_homography(coords[ok].astype(float), centers[ok])
        lo, hi = coords[ok].min(axis=0), coords[ok].max(axis=0)
        coords, ok = _reassign(centers, H, lo, hi)
    if np.count_nonzero(ok) < min_features:
        raise RecognitionFailed("too many features off the lattice")
    H = fit_homography(coords[ok].astype(float), centers[ok])
    lo = coords[ok].min(axis=0)
    ij = coords - lo
    H = H @ np.array([[1.0, 0.0, lo[0]], [0.0, 1.0, lo[1]], [0.0, 0.0, 1.0]])
    ext = tuple(ij[ok].max(axis=0) + 1)
    hyps = []
    if ext == (cols, rows):
        hyps += [0, 180]
    if ext == (rows, cols):
        hyps += [90, 270]
    if not hyps:
        raise RecognitionFailed(f"lattice extent {ext} does not match a {rows}x{cols} pattern")

    inner_ratio = pattern.inner_radius / pattern.circle_radius
    sig = np.zeros(len(candidates))
    for k in np.flatnonzero(ok):
        J = _homography_jacobian(H, ij[k].astype(float))
        s, cnt = crosspoint_signature(candidates[k], events, np.linalg.inv(J), inner_ratio)
        sig[k] = np.sign(s) if cnt else 0.0
    parity = pattern.parity().reshape(rows, cols)
    scores = []
    for rot in hyps:
        r, c = _hypothesis_ids(ij[ok], rot, rows, cols)
        pred = parity[r, c] * (1 if rot in (0, 180) else -1)
        scores.append(float(np.sum(pred * sig[ok])))
    order = np.argsort(scores)[::-1]
    best = hyps[order[0]]
    margin = scores[order[0]] - (scores[order[1]] if len(hyps) > 1 else -scores[order[0]])
    if margin <= 0:
        raise RecognitionFailed("pattern orientation is ambiguous")
    r, c = _hypothesis_ids(ij, best, rows, cols)
    ids = np.where(ok, r * cols + c, -1)
    return DecodeResult(ids, best, margin, H)
