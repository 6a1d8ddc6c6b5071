"""Uniform cumulative cubic B-splines on SO(3) and R^3.

Knot convention: a segment with ``N`` control points and first valid knot
``t0`` is defined on the half-open interval ``[t0, t0 + (N - 3) dt)``. For
``tau`` in ``[t0 + i dt, t0 + (i + 1) dt)`` the active control points are
``i .. i + 3`` and ``u = (tau - t0) / dt - i``. Control point ``c`` therefore
sits (roughly) at time ``t0 + (c - 1) dt``.

Rotations are world-to-camera (``p_cam = R p_world + t``); angular rates are
expressed in the body (right-trivialized) frame, ``dR/dt = R hat(omega)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .errors import InvalidArgumentError, OutOfRangeError

# Standard uniform cubic blending matrix: basis_j(u) = BLEND[j] @ (1, u, u^2, u^3).
BLEND = np.array(
    [
        [1.0, -3.0, 3.0, -1.0],
        [4.0, 0.0, -6.0, 3.0],
        [1.0, 3.0, 3.0, -3.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
) / 6.0


def cumulative_blending_matrix():
    """Row j is the sum of rows j..3 of the standard blending matrix."""
    return np.cumsum(BLEND[::-1], axis=0)[::-1].copy()


CUMULATIVE_BLEND = cumulative_blending_matrix()


def cumulative_basis(u, dt=1.0):
    """Return cumulative basis values and their time derivatives.

    Parameters
    ----------
    u : array_like
        Normalized time(s) in ``[0, 1)``.
    dt : float
        Knot interval; the derivative is scaled by ``1 / dt``.

    Returns
    -------
    values, derivative : ndarray, shape (..., 4)
    """
    u = np.asarray(u, dtype=float)
    powers = np.stack([np.ones_like(u), u, u * u, u * u * u], axis=-1)
    dpowers = np.stack([np.zeros_like(u), np.ones_like(u), 2.0 * u, 3.0 * u * u], axis=-1)
    return powers @ CUMULATIVE_BLEND.T, (dpowers @ CUMULATIVE_BLEND.T) / dt


def basis(u):
    """Non-cumulative basis values (used for the translation Jacobian)."""
    u = np.asarray(u, dtype=float)
    powers = np.stack([np.ones_like(u), u, u * u, u * u * u], axis=-1)
    return powers @ BLEND.T


@dataclass(frozen=True, eq=False)
class SplineSegment:
    t0: float
    dt: float
    rot_cps: np.ndarray
    trans_cps: np.ndarray
    _increments: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rot = np.array(self.rot_cps, dtype=float)
        trans = np.array(self.trans_cps, dtype=float)
        if not self.dt > 0:
            raise InvalidArgumentError("knot interval must be positive")
        if rot.ndim != 3 or rot.shape[1:] != (3, 3):
            raise InvalidArgumentError(f"rotation control points must be (N, 3, 3), got {rot.shape}")
        if trans.shape != (rot.shape[0], 3):
            raise InvalidArgumentError("translation control points must be (N, 3) with matching N")
        if rot.shape[0] < 4:
            raise InvalidArgumentError("a cubic spline segment needs at least 4 control points")
        so3.check_rotation(rot)
        rot.flags.writeable = False
        trans.flags.writeable = False
        inc = so3.so3_log(np.swapaxes(rot[:-1], -1, -2) @ rot[1:], check=False)
        inc.flags.writeable = False
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "rot_cps", rot)
        object.__setattr__(self, "trans_cps", trans)
        object.__setattr__(self, "_increments", inc)

    @property
    def n(self):
        return self.rot_cps.shape[0]

    @property
    def t_end(self):
        """Exclusive end of the valid domain."""
        return self.t0 + (self.n - 3) * self.dt

    def contains(self, tau):
        s = (np.asarray(tau, dtype=float) - self.t0) / self.dt
        return (s >= 0.0) & (s < self.n - 3)

    def span(self, tau):
        """Span index and normalized time for each ``tau``."""
        tau = np.asarray(tau, dtype=float)
        s = (tau - self.t0) / self.dt
        if np.any(~((s >= 0.0) & (s < self.n - 3))):
            bad = tau[~((s >= 0.0) & (s < self.n - 3))] if tau.ndim else tau
            raise OutOfRangeError(
                f"time {np.ravel(bad)[0]!r} outside spline domain [{self.t0}, {self.t_end})"
            )
        i = np.minimum(np.floor(s).astype(int), self.n - 4)
        return i, s - i

    def with_control_points(self, rot_cps, trans_cps):
        return SplineSegment(self.t0, self.dt, rot_cps, trans_cps)


def _rotation_parts(seg, i, u):
    B, dB = cumulative_basis(u, seg.dt)
    d = seg._increments[i[..., None] + np.arange(3)]  # (..., 3, 3): d_1..d_3
    A = so3.so3_exp(B[..., 1:, None] * d)
    return B, dB, d, A


def eval_rotation(seg, tau):
    i, u = seg.span(tau)
    _, _, _, A = _rotation_parts(seg, i, u)
    return seg.rot_cps[i] @ A[..., 0, :, :] @ A[..., 1, :, :] @ A[..., 2, :, :]


def eval_translation(seg, tau):
    i, u = seg.span(tau)
    B, _ = cumulative_basis(u, seg.dt)
    idx = i[..., None] + np.arange(4)
    diffs = seg.trans_cps[idx[..., 1:]] - seg.trans_cps[idx[..., :3]]
    return seg.trans_cps[i] + np.sum(B[..., 1:, None] * diffs, axis=-2)


def eval_rotation_rate(seg, tau):
    """Rotation and body angular velocity via the product rule on A_1 A_2 A_3."""
    i, u = seg.span(tau)
    _, dB, d, A = _rotation_parts(seg, i, u)
    A1, A2, A3 = A[..., 0, :, :], A[..., 1, :, :], A[..., 2, :, :]
    dA = A @ so3.hat(dB[..., 1:, None] * d)
    dA1, dA2, dA3 = dA[..., 0, :, :], dA[..., 1, :, :], dA[..., 2, :, :]
    Ri = seg.rot_cps[i]
    R = Ri @ A1 @ A2 @ A3
    Rdot = Ri @ (dA1 @ A2 @ A3 + A1 @ dA2 @ A3 + A1 @ A2 @ dA3)
    omega = so3.vee(np.swapaxes(R, -1, -2) @ Rdot)
    return R, omega


def eval_velocity(seg, tau):
    i, u = seg.span(tau)
    _, dB = cumulative_basis(u, seg.dt)
    idx = i[..., None] + np.arange(4)
    diffs = seg.trans_cps[idx[..., 1:]] - seg.trans_cps[idx[..., :3]]
    return np.sum(dB[..., 1:, None] * diffs, axis=-2)


@dataclass
class PoseJacobians:
    """Pose, rates, and control-point sensitivities at a batch of times.

    ``d_eps[s, k]`` maps a right perturbation ``R_{i+k} <- R_{i+k} Exp(delta)``
    to the induced right perturbation of ``R(tau)``; ``weights[s, k]`` is the
    derivative of ``t(tau)`` with respect to ``t_{i+k}``.
    """

    span: np.ndarray
    R: np.ndarray
    t: np.ndarray
    omega: np.ndarray
    velocity: np.ndarray
    d_eps: np.ndarray
    weights: np.ndarray


def pose_jacobians(seg, tau):
    i, u = seg.span(tau)
    B, dB, d, A = _rotation_parts(seg, i, u)
    A1, A2, A3 = A[..., 0, :, :], A[..., 1, :, :], A[..., 2, :, :]
    Ri = seg.rot_cps[i]
    R = Ri @ A1 @ A2 @ A3
    dA = A @ so3.hat(dB[..., 1:, None] * d)
    Rdot = Ri @ (dA[..., 0, :, :] @ A2 @ A3 + A1 @ dA[..., 1, :, :] @ A3 + A1 @ A2 @ dA[..., 2, :, :])
    omega = so3.vee(np.swapaxes(R, -1, -2) @ Rdot)

    T = lambda m: np.swapaxes(m, -1, -2)  # noqa: E731
    # P_j = (A_{j+1} ... A_3)^T
    P3 = np.broadcast_to(np.eye(3), A1.shape)
    P2 = T(A3)
    P1 = T(A2 @ A3)
    P0 = T(A1 @ A2 @ A3)
    Pj = [P1, P2, P3]
    Jr_Bd = so3.right_jacobian(B[..., 1:, None] * d)  # (..., 3, 3, 3)
    Jr_inv_d = so3.right_jacobian_inv(d)
    Jl_inv_d = np.swapaxes(Jr_inv_d, -1, -2)
    second = []  # effect through d_j when R_{i+j} is perturbed
    first = []  # effect through d_j when R_{i+j-1} is perturbed
    for j in range(3):
        G = Pj[j] @ (B[..., j + 1, None, None] * Jr_Bd[..., j, :, :])
        second.append(G @ Jr_inv_d[..., j, :, :])
        first.append(-G @ Jl_inv_d[..., j, :, :])
    d_eps = np.stack(
        [P0 + first[0], second[0] + first[1], second[1] + first[2], second[2]], axis=-3
    )

    idx = i[..., None] + np.arange(4)
    diffs = seg.trans_cps[idx[..., 1:]] - seg.trans_cps[idx[..., :3]]
    t = seg.trans_cps[i] + np.sum(B[..., 1:, None] * diffs, axis=-2)
    v = np.sum(dB[..., 1:, None] * diffs, axis=-2)
    return PoseJacobians(i, R, t, omega, v, d_eps, basis(u))


def fit_segment(t0, dt, n, times, rotations, translations, ridge=1e-9):
    """Initialize a segment from discrete poses.

    Rotation control points come from geodesic interpolation of the discrete
    rotations at the control-point times; translations from a linear
    least-squares fit through the spline basis.
    """
    times = np.asarray(times, dtype=float)
    order = np.argsort(times)
    times, rotations, translations = times[order], rotations[order], translations[order]
    cp_times = t0 + (np.arange(n) - 1.0) * dt
    rot_cps = interpolate_rotations(times, rotations, cp_times)

    s = (times - t0) / dt
    keep = (s >= 0) & (s < n - 3)
    s, tr = s[keep], translations[keep]
    i = np.minimum(np.floor(s).astype(int), n - 4)
    w = basis(s - i)
    A = np.zeros((len(s), n))
    np.put_along_axis(A, i[:, None] + np.arange(4), w, axis=1)
    # light second-difference regularization keeps unobserved control points finite
    D = np.diff(np.eye(n), 2, axis=0)
    lhs = A.T @ A + ridge * (D.T @ D) + ridge * np.eye(n)
    trans_cps = np.linalg.solve(lhs, A.T @ tr)
    return SplineSegment(t0, dt, rot_cps, trans_cps)


def interpolate_rotations(times, rotations, query):
    """Piecewise geodesic interpolation, clamped at the ends."""
    times = np.asarray(times, dtype=float)
    query = np.clip(np.asarray(query, dtype=float), times[0], times[-1])
    if len(times) == 1:
        return np.broadcast_to(rotations[0], query.shape + (3, 3)).copy()
    k = np.clip(np.searchsorted(times, query, side="right") - 1, 0, len(times) - 2)
    span = times[k + 1] - times[k]
    a = np.where(span > 0, (query - times[k]) / np.where(span > 0, span, 1.0), 0.0)
    rel = so3.so3_log(np.swapaxes(rotations[k], -1, -2) @ rotations[k + 1], check=False)
    return rotations[k] @ so3.so3_exp(a[:, None] * rel)


def segment_to_dict(seg):
    """Serializable form: rotations as unit quaternions ``(w, x, y, z)``."""
    return {
        "t0_s": seg.t0,
        "dt_s": seg.dt,
        "rotations_wxyz": so3.to_quaternion(seg.rot_cps).tolist(),
        "translations_m": seg.trans_cps.tolist(),
    }


def segment_from_dict(d):
    return SplineSegment(
        float(d["t0_s"]),
        float(d["dt_s"]),
        so3.from_quaternion(np.asarray(d["rotations_wxyz"], dtype=float)),
        np.asarray(d["translations_m"], dtype=float),
    )
