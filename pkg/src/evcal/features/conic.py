"""Conic fitting in the ``alpha + gamma = 1`` gauge.

Coefficients are ordered ``(alpha, beta, gamma, eta, eps, zeta)`` for
``alpha x^2 + beta x y + gamma y^2 + eta x + eps y + zeta = 0``.
"""

import numpy as np

from ..errors import InvalidArgumentError


def conic_matrix(c):
    a, b, g, e, s, z = c
    return np.array([[a, b / 2, e / 2], [b / 2, g, s / 2], [e / 2, s / 2, z]])


def conic_coeffs(Q):
    Q = 0.5 * (Q + Q.T)
    return np.array([Q[0, 0], 2 * Q[0, 1], Q[1, 1], 2 * Q[0, 2], 2 * Q[1, 2], Q[2, 2]])


def normalize(c):
    c = np.asarray(c, dtype=float)
    tr = c[0] + c[2]
    if abs(tr) < 1e-300:
        raise InvalidArgumentError("conic with alpha + gamma = 0 cannot be normalized")
    return c / tr


def translate(c, shift):
    """Conic of the point set moved by ``shift``."""
    T = np.array([[1.0, 0.0, -shift[0]], [0.0, 1.0, -shift[1]], [0.0, 0.0, 1.0]])
    return conic_coeffs(T.T @ conic_matrix(c) @ T)


def is_ellipse(c):
    a, b, g = c[0], c[1], c[2]
    if not b * b - 4 * a * g < 0:
        return False
    # a real (non-empty) ellipse is negative at its center when a, g > 0
    ctr = center(c)
    val = conic_matrix(c)
    p = np.array([ctr[0], ctr[1], 1.0])
    return bool(p @ val @ p < 0)


def center(c):
    a, b, g, e, s, _ = c
    A = np.array([[2 * a, b], [b, 2 * g]])
    return np.linalg.solve(A, [-e, -s])


def axes(c):
    """Semi-axes (major, minor) and major-axis angle in radians."""
    ctr = center(c)
    cc = translate(c, -ctr)
    M = np.array([[cc[0], cc[1] / 2], [cc[1] / 2, cc[2]]])
    evals, evecs = np.linalg.eigh(M)
    k = -cc[5]
    semi = np.sqrt(k / evals)  # evals ascending -> semi descending
    angle = float(np.arctan2(evecs[1, 0], evecs[0, 0]))
    return float(semi[0]), float(semi[1]), angle


def evaluate(c, x, y):
    a, b, g, e, s, z = c
    return a * x * x + b * x * y + g * y * y + e * x + s * y + z


def sampson_distance(c, x, y):
    a, b, g, e, s, _ = c
    gx = 2 * a * x + b * y + e
    gy = b * x + 2 * g * y + s
    return evaluate(c, x, y) / np.maximum(np.hypot(gx, gy), 1e-12)


def fit_conic(x, y):
    """Direct least squares with ``alpha + gamma = 1``.

    Returns the coefficient vector and the RMS Sampson distance (pixels).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 5:
        raise InvalidArgumentError("need at least 5 points to fit a conic")
    mx, my = x.mean(), y.mean()
    xc, yc = x - mx, y - my
    A = np.stack([xc * xc - yc * yc, xc * yc, xc, yc, np.ones_like(xc)], axis=1)
    rhs = -yc * yc
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    a, b, d, e, f = sol
    c = translate(np.array([a, b, 1.0 - a, d, e, f]), (mx, my))
    err = float(np.sqrt(np.mean(sampson_distance(c, x, y) ** 2)))
    return c, err


def angular_range(cx, cy, xs, ys):
    """Circular span (degrees) of point angles about a center."""
    ang = np.sort(np.arctan2(np.asarray(ys) - cy, np.asarray(xs) - cx))
    if ang.size < 2:
        return 0.0
    gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
    return float(np.degrees(2 * np.pi - gaps.max()))


def sample_ellipse(c, n=200, start=0.0, stop=2 * np.pi):
    """Points on the ellipse at evenly spaced parametric angles."""
    ctr = center(c)
    a, b, ang = axes(c)
    th = np.linspace(start, stop, n, endpoint=False)
    ca, sa = np.cos(ang), np.sin(ang)
    px = a * np.cos(th)
    py = b * np.sin(th)
    return ctr[0] + ca * px - sa * py, ctr[1] + sa * px + ca * py
