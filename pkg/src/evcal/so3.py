"""Rotation group helpers: hat/vee, exponential and logarithm maps, Jacobians.

All functions accept stacked inputs: vectors of shape ``(..., 3)`` and
matrices of shape ``(..., 3, 3)``.

Sign convention of :func:`so3_log` at exactly pi: the rotation axis is
returned with its largest-magnitude component positive, so a half turn
about ``+z`` or ``-z`` both map to ``(0, 0, pi)``.
"""

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

from .errors import InvalidArgumentError

EXP_SMALL_ANGLE = 1e-8
LOG_SMALL_ANGLE = 1e-8
# Above this angle the axis is recovered from the symmetric part of R.
LOG_NEAR_PI = 3.0


def hat(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def so3_exp(omega):
    """Rodrigues map from a rotation vector to a rotation matrix."""
    omega = np.asarray(omega, dtype=float)
    if omega.shape[-1:] != (3,):
        raise InvalidArgumentError(f"expected (..., 3) rotation vector, got {omega.shape}")
    if not np.all(np.isfinite(omega)):
        raise InvalidArgumentError("non-finite rotation vector")
    theta2 = np.sum(omega * omega, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < EXP_SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat(omega)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def check_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise InvalidArgumentError(f"expected (..., 3, 3) rotation, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise InvalidArgumentError("non-finite rotation matrix")
    err = np.linalg.norm(R @ np.swapaxes(R, -1, -2) - np.eye(3), axis=(-2, -1))
    if np.any(err > tol) or np.any(np.linalg.det(R) < 0):
        raise InvalidArgumentError(
            f"matrix is not a rotation (orthonormality error {np.max(err):.3g})"
        )


def so3_log(R, check=True):
    """Principal logarithm, ``|result| <= pi``."""
    R = np.asarray(R, dtype=float)
    if check:
        check_rotation(R)
    w = vee(R - np.swapaxes(R, -1, -2))  # 2 sin(theta) axis
    s = 0.5 * np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)

    small = theta < LOG_SMALL_ANGLE
    safe_s = np.where(s > 0, s, 1.0)  # s = 0 at exactly pi is handled below
    factor = np.where(small, 0.5 + theta * theta / 12.0, 0.5 * theta / safe_s)
    out = factor[..., None] * w

    near_pi = theta > LOG_NEAR_PI
    if np.any(near_pi):
        Rn = R[near_pi]
        cn = c[near_pi]
        B = 0.5 * (Rn + np.swapaxes(Rn, -1, -2)) - cn[:, None, None] * np.eye(3)
        k = np.argmax(np.diagonal(B, axis1=-2, axis2=-1), axis=-1)
        rows = B[np.arange(len(k)), k]
        axis = rows / np.linalg.norm(rows, axis=-1, keepdims=True)
        sign = np.sign(np.sum(axis * w[near_pi], axis=-1))
        # exactly at pi: make the dominant component positive
        dom = np.take_along_axis(axis, np.argmax(np.abs(axis), axis=-1)[:, None], -1)[:, 0]
        sign = np.where(sign == 0, np.sign(dom), sign)
        out[near_pi] = (sign * theta[near_pi])[:, None] * axis
    return out


def _series_coeffs(theta):
    """Coefficients (1-cos)/t^2 and (t-sin)/t^3 with small-angle fallbacks."""
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    return a, b


def right_jacobian(phi):
    """Jr(phi) with Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b = _series_coeffs(theta)
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - a[..., None, None] * K + b[..., None, None] * (K @ K)


def right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta * theta / 720.0,
        1.0 / (t * t) - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)),
    )
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + 0.5 * K + c[..., None, None] * (K @ K)


def left_jacobian_inv(phi):
    return right_jacobian_inv(-np.asarray(phi, dtype=float))


def rotation_angle(R):
    """Absolute rotation angle in radians."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.linalg.norm(vee(R - np.swapaxes(R, -1, -2)), axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(s, c)


def project_to_rotation(M):
    """Nearest rotation in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.ones(np.shape(M)[:-1])
    D[..., -1] = np.sign(np.linalg.det(U @ Vt))
    return (U * D[..., None, :]) @ Vt


def to_quaternion(R):
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    q = _ScipyRotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    q = np.concatenate([q[..., 3:], q[..., :3]], axis=-1)
    return np.where(q[..., :1] < 0, -q, q)


def from_quaternion(q):
    q = np.asarray(q, dtype=float)
    return _ScipyRotation.from_quat(np.concatenate([q[..., 1:], q[..., :1]], axis=-1)).as_matrix()
