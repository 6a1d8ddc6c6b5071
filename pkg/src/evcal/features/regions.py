"""Connected regions of same-polarity pixels and their principal components."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(eq=False)
class ConnectedRegion:
    polarity: int
    label: int
    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    centroid: np.ndarray
    pc1_mag: float
    pc2_mag: float
    beta_pc: float
    axis: np.ndarray  # unit direction of the first principal component

    @property
    def size(self):
        return int(self.xs.size)


def principal_components(xs, ys):
    """Square roots of the coordinate covariance eigenvalues, largest first."""
    pts = np.stack([xs, ys], axis=1).astype(float)
    c = pts.mean(axis=0)
    d = pts - c
    cov = d.T @ d / max(len(pts), 1)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    pc1, pc2 = np.sqrt(evals[1]), np.sqrt(evals[0])
    # exact lines can leave round-off in the small eigenvalue
    if pc2 <= 1e-9 * max(pc1, 1.0):
        pc2 = 0.0
    return c, pc1, pc2, evecs[:, 1]


def label_map(mask):
    """8-connected labeling; returns ``(labels, count)``."""
    return ndimage.label(mask, structure=EIGHT_CONNECTED)


def _regions_from_mask(mask, tmap, polarity, label_offset=0):
    labels, n = label_map(mask)
    if n == 0:
        return [], labels
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs]
    order = np.argsort(lab, kind="stable")
    ys, xs, lab = ys[order], xs[order], lab[order]
    bounds = np.searchsorted(lab, np.arange(1, n + 2))
    out = []
    for k in range(n):
        a, b = bounds[k], bounds[k + 1]
        rx, ry = xs[a:b], ys[a:b]
        c, pc1, pc2, axis = principal_components(rx, ry)
        beta = pc1 / pc2 if pc2 > 0 else np.inf
        out.append(
            ConnectedRegion(polarity, label_offset + k + 1, rx, ry, tmap[ry, rx], c, pc1, pc2, beta, axis)
        )
    return out, labels


def label_regions(frame):
    """Connected regions of the positive and negative occupancy maps."""
    pos, _ = _regions_from_mask(frame.pos_map >= 0, frame.pos_map, +1)
    neg, _ = _regions_from_mask(frame.neg_map >= 0, frame.neg_map, -1)
    return pos + neg


def suppress_noise(regions, t_pc=5.0, min_region_size=10):
    """Drop line-like regions (``beta_pc >= t_pc``) and tiny regions."""
    return [r for r in regions if r.beta_pc < t_pc and r.size >= min_region_size]

