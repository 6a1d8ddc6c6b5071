"""Plane-to-image homographies, closed-form intrinsics and planar poses."""

import numpy as np

from . import nls, so3
from .camera import Intrinsics, pixel_to_normalized, project
from .errors import InitFailed, InvalidArgumentError


def _normalizer(pts):
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    s = np.sqrt(2.0) / max(d, 1e-12)
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def fit_homography(src, dst):
    """Normalized DLT mapping ``src`` (N, 2) to ``dst`` (N, 2), N >= 4."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape[0] < 4 or src.shape != dst.shape:
        raise InvalidArgumentError("need at least 4 point pairs of equal shape")
    Ts, Td = _normalizer(src), _normalizer(dst)
    s = apply_homography(Ts, src)
    d = apply_homography(Td, dst)
    n = len(s)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = s
    A[0::2, 2] = 1
    A[0::2, 6:8] = -d[:, :1] * s
    A[0::2, 8] = -d[:, 0]
    A[1::2, 3:5] = s
    A[1::2, 5] = 1
    A[1::2, 6:8] = -d[:, 1:] * s
    A[1::2, 8] = -d[:, 1]
    _, _, vt = np.linalg.svd(A)
    H = vt[-1].reshape(3, 3)
    H = np.linalg.solve(Td, H @ Ts)
    return H / H[2, 2]


def apply_homography(H, pts):
    pts = np.asarray(pts, dtype=float)
    h = pts @ H[:, :2].T + H[:, 2]
    return h[..., :2] / h[..., 2:3]


def _v(H, i, j):
    h = H.T
    return np.array(
        [
            h[i, 0] * h[j, 0],
            h[i, 0] * h[j, 1] + h[i, 1] * h[j, 0],
            h[i, 1] * h[j, 1],
            h[i, 2] * h[j, 0] + h[i, 0] * h[j, 2],
            h[i, 2] * h[j, 1] + h[i, 1] * h[j, 2],
            h[i, 2] * h[j, 2],
        ]
    )


def zhang_intrinsics(homographies):
    """Closed-form pinhole intrinsics from plane homographies (zero skew)."""
    if len(homographies) < 3:
        raise InitFailed("closed-form intrinsics need at least 3 homographies")
    rows = []
    for H in homographies:
        H = H / np.linalg.norm(H[:, 0])
        rows.append(_v(H, 0, 1))
        rows.append(_v(H, 0, 0) - _v(H, 1, 1))
    rows.append([0, 1, 0, 0, 0, 0])  # zero skew
    V = np.array(rows)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    _, sv, vt = np.linalg.svd(V)
    if sv[-2] < 1e-9 * sv[0]:
        raise InitFailed("homographies are degenerate (views too similar, e.g. rotation about the optical axis)")
    b = vt[-1]
    B11, B12, B22, B13, B23, B33 = b
    if B11 < 0:
        B11, B12, B22, B13, B23, B33 = -b
    den = B11 * B22 - B12 * B12
    if not (B11 > 0 and den > 0):
        raise InitFailed("closed-form intrinsics are not positive definite")
    cy = (B12 * B13 - B11 * B23) / den
    lam = B33 - (B13 * B13 + cy * (B12 * B13 - B11 * B23)) / B11
    if not lam / B11 > 0 or not lam * B11 / den > 0:
        raise InitFailed("closed-form intrinsics are not positive definite")
    fx = np.sqrt(lam / B11)
    fy = np.sqrt(lam * B11 / den)
    cx = -B13 * fx * fx / lam
    return Intrinsics(float(fx), float(fy), float(cx), float(cy))


def pose_from_homography(K, H):
    """World-to-camera pose of the plane ``Z = 0`` from ``H ~ K [r1 r2 t]``."""
    M = np.linalg.solve(K, H)
    s = 2.0 / (np.linalg.norm(M[:, 0]) + np.linalg.norm(M[:, 1]))
    if M[2, 2] * s < 0:  # plane must lie in front of the camera
        s = -s
    r1, r2, t = s * M[:, 0], s * M[:, 1], s * M[:, 2]
    R = so3.project_to_rotation(np.stack([r1, r2, np.cross(r1, r2)], axis=1))
    return R, t


def _pose_problem(intr, world, pixels, R, t):
    rot = nls.ParameterBlock(R.copy(), nls.ROTATION, name="R")
    tr = nls.ParameterBlock(np.asarray(t, dtype=float).copy(), name="t")

    def evaluate(values, need_jac):
        Rv, tv = values
        pc = world @ Rv.T + tv
        if not need_jac:
            return (project(intr, pc, strict=False) - pixels).ravel(), None
        uv, dp, _ = project(intr, pc, jacobians=True, strict=False)
        J = np.zeros((2 * len(world), 6))
        # right perturbation: d(R p)/d delta = -R hat(p)
        J[:, :3] = (dp @ (-Rv @ so3.hat(world))).reshape(-1, 3)
        J[:, 3:] = dp.reshape(-1, 3)
        return (uv - pixels).ravel(), J

    return nls.Problem([rot, tr], evaluate, residual_block_size=2)


def planar_pnp(intr, world, pixels, refine=True):
    """Pose of a planar target from >= 4 correspondences."""
    world = np.asarray(world, dtype=float)
    pixels = np.asarray(pixels, dtype=float)
    xy = pixel_to_normalized(intr, pixels)
    H = fit_homography(world[:, :2], xy)
    R, t = pose_from_homography(np.eye(3), H)
    if refine:
        prob = _pose_problem(intr, world, pixels, R, t)
        nls.solve(prob, options=nls.SolverOptions(max_iterations=50))
        R, t = prob.blocks[0].value, prob.blocks[1].value
    return R, t


def calibrate_planar(views, world, intr0=None, max_iterations=100):
    """Closed-form initialization followed by joint refinement.

    Parameters
    ----------
    views : list of (ids, pixels)
        Observed feature ids and their pixel positions per view.
    world : ndarray (M, 3)
        Pattern points indexed by feature id.

    Returns
    -------
    intrinsics, list of (R, t), SolverReport
    """
    hs = [fit_homography(world[ids, :2], px) for ids, px in views]
    if intr0 is None:
        intr0 = zhang_intrinsics(hs)
    K = intr0.K()
    poses = [pose_from_homography(K, H) for H in hs]

    k_block = nls.ParameterBlock(intr0.as_array(), name="intrinsics")
    blocks = [k_block]
    for R, t in poses:
        blocks.append(nls.ParameterBlock(R.copy(), nls.ROTATION))
        blocks.append(nls.ParameterBlock(t.copy()))
    n_obs = [len(ids) for ids, _ in views]
    rows = np.concatenate([[0], np.cumsum(n_obs)]) * 2

    def evaluate(values, need_jac):
        k = values[0]
        r = np.empty(rows[-1])
        J = np.zeros((rows[-1], 6 + 6 * len(views))) if need_jac else None
        for v, (ids, px) in enumerate(views):
            Rv, tv = values[1 + 2 * v], values[2 + 2 * v]
            P = world[ids]
            pc = P @ Rv.T + tv
            a, b = rows[v], rows[v + 1]
            if need_jac:
                uv, dp, dk = project(k, pc, jacobians=True, strict=False)
                J[a:b, :6] = dk.reshape(-1, 6)
                c = 6 + 6 * v
                J[a:b, c : c + 3] = (dp @ (-Rv @ so3.hat(P))).reshape(-1, 3)
                J[a:b, c + 3 : c + 6] = dp.reshape(-1, 3)
            else:
                uv = project(k, pc, strict=False)
            r[a:b] = (uv - px).ravel()
        return r, J

    prob = nls.Problem(blocks, evaluate, residual_block_size=2)
    report = nls.solve(prob, options=nls.SolverOptions(max_iterations=max_iterations))
    intr = Intrinsics.from_array(prob.blocks[0].value)
    poses = [(prob.blocks[1 + 2 * v].value, prob.blocks[2 + 2 * v].value) for v in range(len(views))]
    return intr, poses, report
