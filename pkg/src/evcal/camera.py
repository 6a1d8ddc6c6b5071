"""Pinhole projection with two-term radial distortion, and pattern geometry."""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import BehindCameraError, InvalidArgumentError, NonConvergenceError


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if not np.all(np.isfinite(self.as_array())):
            raise InvalidArgumentError("non-finite intrinsics")

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy, self.k1, self.k2], dtype=float)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a))

    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CameraGeometry:
    intrinsics: Intrinsics
    resolution: tuple

    def __post_init__(self):
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise InvalidArgumentError("resolution must be positive")
        object.__setattr__(self, "resolution", (int(w), int(h)))

    def in_image(self, uv, margin=0.0):
        w, h = self.resolution
        uv = np.asarray(uv)
        return (
            (uv[..., 0] >= margin - 0.5)
            & (uv[..., 0] <= w - 0.5 - margin)
            & (uv[..., 1] >= margin - 0.5)
            & (uv[..., 1] <= h - 0.5 - margin)
        )


EVENT_RESOLUTION = (346, 260)
FRAME_RESOLUTION = (1280, 1024)


def _as_params(intr):
    return intr.as_array() if isinstance(intr, Intrinsics) else np.asarray(intr, dtype=float)


def project(intr, p_cam, jacobians=False, strict=True):
    """Project camera-frame points to pixels.

    Parameters
    ----------
    intr : Intrinsics or array_like of 6
    p_cam : array_like, shape (..., 3)
    jacobians : bool
        Also return ``d uv / d p`` of shape (..., 2, 3) and
        ``d uv / d intrinsics`` of shape (..., 2, 6).
    strict : bool
        Raise :class:`BehindCameraError` for ``z <= 0``. With ``strict=False``
        such points produce NaN pixels so callers can flag them.
    """
    fx, fy, cx, cy, k1, k2 = _as_params(intr)
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    behind = ~(z > 0)
    if np.any(behind):
        if strict:
            raise BehindCameraError("point at or behind the camera plane")
        z = np.where(behind, np.nan, z)
    x = p[..., 0] / z
    y = p[..., 1] / z
    r2 = x * x + y * y
    d = 1.0 + k1 * r2 + k2 * r2 * r2
    uv = np.stack([fx * x * d + cx, fy * y * d + cy], axis=-1)
    if not jacobians:
        return uv

    dd_dr2 = k1 + 2.0 * k2 * r2
    # d(x d)/dx etc.
    jxx = d + 2.0 * x * x * dd_dr2
    jxy = 2.0 * x * y * dd_dr2
    jyy = d + 2.0 * y * y * dd_dr2
    dn = np.zeros(p.shape[:-1] + (2, 2))
    dn[..., 0, 0] = fx * jxx
    dn[..., 0, 1] = fx * jxy
    dn[..., 1, 0] = fy * jxy
    dn[..., 1, 1] = fy * jyy
    inv_z = 1.0 / z
    dxy_dp = np.zeros(p.shape[:-1] + (2, 3))
    dxy_dp[..., 0, 0] = inv_z
    dxy_dp[..., 0, 2] = -x * inv_z
    dxy_dp[..., 1, 1] = inv_z
    dxy_dp[..., 1, 2] = -y * inv_z
    dp = dn @ dxy_dp

    dk = np.zeros(p.shape[:-1] + (2, 6))
    dk[..., 0, 0] = x * d
    dk[..., 1, 1] = y * d
    dk[..., 0, 2] = 1.0
    dk[..., 1, 3] = 1.0
    dk[..., 0, 4] = fx * x * r2
    dk[..., 1, 4] = fy * y * r2
    dk[..., 0, 5] = fx * x * r2 * r2
    dk[..., 1, 5] = fy * y * r2 * r2
    return uv, dp, dk


def distort_normalized(intr, xy):
    _, _, _, _, k1, k2 = _as_params(intr)
    xy = np.asarray(xy, dtype=float)
    r2 = np.sum(xy * xy, axis=-1, keepdims=True)
    return xy * (1.0 + k1 * r2 + k2 * r2 * r2)


def undistort_normalized(intr, xy_d, max_iter=20, tol=1e-10):
    """Fixed-point inversion of the radial model in normalized coordinates."""
    _, _, _, _, k1, k2 = _as_params(intr)
    xy_d = np.asarray(xy_d, dtype=float)
    xy = xy_d.copy()
    if k1 == 0.0 and k2 == 0.0:
        return xy
    for _ in range(max_iter):
        r2 = np.sum(xy * xy, axis=-1, keepdims=True)
        new = xy_d / (1.0 + k1 * r2 + k2 * r2 * r2)
        step = np.max(np.abs(new - xy)) if new.size else 0.0
        xy = new
        if step < tol:
            return xy
    # the plain iteration can stall for strong distortion; polish with Newton
    for _ in range(max_iter):
        r2 = np.sum(xy * xy, axis=-1)
        d = 1.0 + k1 * r2 + k2 * r2 * r2
        g = k1 + 2.0 * k2 * r2
        f = xy * d[..., None] - xy_d
        J = np.empty(xy.shape[:-1] + (2, 2))
        J[..., 0, 0] = d + 2.0 * xy[..., 0] ** 2 * g
        J[..., 1, 1] = d + 2.0 * xy[..., 1] ** 2 * g
        J[..., 0, 1] = J[..., 1, 0] = 2.0 * xy[..., 0] * xy[..., 1] * g
        step = np.linalg.solve(J, f[..., None])[..., 0]
        xy = xy - step
        if np.max(np.abs(step)) < tol:
            return xy
    raise NonConvergenceError("radial undistortion did not converge")


def pixel_to_normalized(intr, px):
    fx, fy, cx, cy, _, _ = _as_params(intr)
    px = np.asarray(px, dtype=float)
    xy_d = np.stack([(px[..., 0] - cx) / fx, (px[..., 1] - cy) / fy], axis=-1)
    return undistort_normalized(intr, xy_d)


def unproject_to_ray(intr, px):
    """Unit-norm viewing ray for pixel(s)."""
    xy = pixel_to_normalized(intr, px)
    ray = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
    return ray / np.linalg.norm(ray, axis=-1, keepdims=True)


@dataclass(frozen=True)
class PatternGeometry:
    """Grid of concentric circle features with a crosspoint at each center.

    World frame: pattern plane ``Z = 0``, origin at the upper-left feature,
    ``X`` along columns and ``Y`` along rows. Inside ``inner_radius`` each
    feature holds a crosspoint whose black quadrants alternate across the
    grid; feature (0, 0) is black towards upper-left and lower-right.
    """

    rows: int = 3
    cols: int = 4
    spacing: float = 0.06
    circle_radius: float = 0.02
    inner_radius: float = None

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise InvalidArgumentError("pattern needs at least 2 rows and 2 columns")
        if not self.spacing > 2 * self.circle_radius:
            raise InvalidArgumentError("spacing must exceed the circle diameter")
        if not self.circle_radius > 0:
            raise InvalidArgumentError("circle radius must be positive")
        if self.inner_radius is None:
            object.__setattr__(self, "inner_radius", 0.6 * self.circle_radius)
        if not 0 < self.inner_radius < self.circle_radius:
            raise InvalidArgumentError("inner radius must lie inside the circle")

    @property
    def size(self):
        return self.rows * self.cols

    def parity(self):
        """+1 where the crosspoint is black upper-left/lower-right, row-major."""
        r, c = np.divmod(np.arange(self.size), self.cols)
        return np.where((r + c) % 2 == 0, 1, -1)

    def to_dict(self):
        return {
            "rows": self.rows,
            "cols": self.cols,
            "spacing_m": self.spacing,
            "circle_radius_m": self.circle_radius,
            "inner_radius_m": self.inner_radius,
        }

    @classmethod
    def from_dict(cls, d):
        known = {"rows", "cols", "spacing_m", "circle_radius_m", "inner_radius_m"}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown pattern keys: {sorted(unknown)}")
        return cls(
            rows=int(d["rows"]),
            cols=int(d["cols"]),
            spacing=float(d["spacing_m"]),
            circle_radius=float(d["circle_radius_m"]),
            inner_radius=None if d.get("inner_radius_m") is None else float(d["inner_radius_m"]),
        )


def pattern_world_points(geom):
    """Row-major feature centers on the Z = 0 plane."""
    r, c = np.divmod(np.arange(geom.rows * geom.cols), geom.cols)
    return np.stack([c * geom.spacing, r * geom.spacing, np.zeros(r.shape)], axis=-1)
