"""Two-stage spatiotemporal calibration of an event camera and a frame camera.

Stage 1 fits a piecewise continuous-time trajectory of the event camera
together with its intrinsics to moving-ellipse features. Stage 2 holds the
trajectory fixed and estimates the frame-camera intrinsics, the
event-to-frame extrinsics and the clock offset from frame observations.

Clock convention: ``t_event = t_frame + t_d``. All internal times are
seconds relative to ``origin_us`` (the earliest feature timestamp), so
shifting every timestamp by a constant leaves the arithmetic unchanged.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import nls, so3
from .camera import Intrinsics, PatternGeometry, pattern_world_points, project
from .errors import (
    CalibrationImpossible,
    InitFailed,
    InvalidArgumentError,
    OutOfRangeError,
)
from .homography import calibrate_planar, planar_pnp
from .spline import SplineSegment, fit_segment, pose_jacobians, segment_from_dict, segment_to_dict

SCHEMA_VERSION = 1
CLOCK_CONVENTION = "t_event = t_frame + t_d"
BEHIND_CAMERA_RESIDUAL = 1e3  # px, flags a point behind the camera
# an edge knot span covered by less than this fraction is trimmed: its outer
# control point would carry a basis weight below (1/2)^3 / 6 and drift freely
EDGE_COVERAGE = 0.5


@dataclass
class FrameObservation:
    """Crosspoints detected in one frame-camera image."""

    t_us: int  # frame clock
    ids: np.ndarray
    uv: np.ndarray

    def __post_init__(self):
        self.t_us = int(self.t_us)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        if len(np.unique(self.ids)) != len(self.ids):
            raise InvalidArgumentError("grid ids must be unique within a frame")
        if len(self.ids) != len(self.uv):
            raise InvalidArgumentError("one pixel position per grid id expected")


@dataclass
class CalibConfig:
    knot_interval: float = 0.012  # s
    samples: tuple = (0, 2)  # sample set, in units of the feature half span
    min_features_per_segment: int = 20  # feature groups (windows)
    min_knots: int = 6
    huber_delta: float = 2.0  # px
    init_views: int = 30
    guard_knots: float = 2.0  # stage-2 guard band at segment ends, in knots
    td_max: float = 0.1  # s
    max_iterations: int = 100
    function_tolerance: float = 1e-10
    stage2_passes: int = 3

    def __post_init__(self):
        self.samples = tuple(int(k) for k in self.samples)
        if not self.knot_interval > 0:
            raise InvalidArgumentError("knot interval must be positive")
        if not self.samples or min(self.samples) < 0:
            raise InvalidArgumentError("sample set must hold non-negative integers")
        if self.min_knots < 4:
            raise InvalidArgumentError("a cubic segment needs at least 4 knots")
        if not self.huber_delta > 0 or not self.td_max > 0:
            raise InvalidArgumentError("huber delta and t_d bound must be positive")


# ---------------------------------------------------------------------------
# segmentation


@dataclass
class TrajectoryPiece:
    """One spline segment with the features it explains.

    ``a`` and ``b`` bound the feature samples (relative seconds); the
    spline domain ``[spline.t0, spline.t_end)`` contains ``[a, b]``.
    """

    a: float
    b: float
    spline: SplineSegment
    features: list

    @property
    def groups(self):
        return len({f.t0_us for f in self.features})

    def summary(self):
        return {
            "start_s": self.a,
            "end_s": self.b,
            "knots": self.spline.n,
            "feature_groups": self.groups,
            "features": len(self.features),
        }


@dataclass
class SegmentedTrajectory:
    origin_us: int
    dt: float
    pieces: list
    dropped_groups: int = 0

    def rel(self, t_us):
        return (np.asarray(t_us, dtype=np.int64) - self.origin_us) * 1e-6

    def piece_index(self, tau, guard=0.0):
        """Index of the piece whose domain holds ``tau`` (-1 if none)."""
        tau = np.asarray(tau, dtype=float)
        out = np.full(tau.shape, -1, dtype=np.int64)
        for k, p in enumerate(self.pieces):
            inside = (tau >= p.spline.t0 + guard) & (tau < p.spline.t_end - guard)
            out[inside & (out < 0)] = k
        return out


def _placeholder_spline(t0, dt, n):
    return SplineSegment(t0, dt, np.broadcast_to(np.eye(3), (n, 3, 3)), np.zeros((n, 3)))


def segment_trajectory(features, dt, min_features=20, min_knots=6, origin_us=None, split=True):
    """Split feature groups into time pieces that each carry a spline.

    Consecutive groups further apart than ``dt`` start a new piece (with
    ``split=False`` everything forms a single piece). Pieces with fewer
    than ``min_features`` groups or fewer than ``min_knots`` control points
    are dropped. Knots lie on a global lattice anchored at ``origin_us``.
    Control points are placeholders until :func:`init_stage1`.

    Raises
    ------
    CalibrationImpossible
        When no piece survives.
    """
    if not features:
        raise CalibrationImpossible("no features to calibrate from")
    feats = sorted(features, key=lambda f: (f.t0_us, f.grid_id))
    t0s = np.array([f.t0_us for f in feats], dtype=np.int64)
    if origin_us is None:
        origin_us = int(t0s[0])
    group_t, first = np.unique(t0s, return_index=True)
    bounds = np.append(first, len(feats))
    gap = np.diff(group_t) * 1e-6 > dt if split else np.zeros(len(group_t) - 1, bool)
    cuts = np.concatenate([[0], np.flatnonzero(gap) + 1, [len(group_t)]])
    pieces = []
    dropped = 0
    # end of each group relative to the origin (s)
    f_end = (t0s - origin_us) * 1e-6 + 2.0 * np.array([f.half_span for f in feats])
    ends = np.full(len(group_t), -np.inf)
    np.maximum.at(ends, np.searchsorted(group_t, t0s), f_end)
    for g0, g1 in zip(cuts[:-1], cuts[1:]):
        n_groups = g1 - g0
        g0, g1 = _trim_edge_spans(group_t, ends, g0, g1, origin_us, dt)
        dropped += n_groups - (g1 - g0)
        if g1 - g0 < min_features:
            dropped += g1 - g0
            continue
        members = feats[bounds[g0] : bounds[g1]]
        a = (group_t[g0] - origin_us) * 1e-6
        b = float(ends[g0:g1].max())
        knot_t0 = _first_knot(a, dt)
        n = int(np.floor((b - knot_t0) / dt)) + 4
        if n < min_knots:
            dropped += g1 - g0
            continue
        pieces.append(TrajectoryPiece(a, b, _placeholder_spline(knot_t0, dt, n), list(members)))
    if not pieces:
        raise CalibrationImpossible(
            f"no trajectory segment with at least {min_features} feature groups and {min_knots} knots"
        )
    return SegmentedTrajectory(int(origin_us), float(dt), pieces, dropped)


def _first_knot(a, dt):
    k0 = np.floor(a / dt + 1e-9)
    if k0 * dt > a:  # rounding put the knot after the first feature
        k0 -= 1
    return k0 * dt


def _trim_edge_spans(group_t, ends, g0, g1, origin_us, dt):
    """Drop groups from thinly covered first and last knot spans of ``[g0, g1)``."""
    while g1 - g0 > 1:
        a = (group_t[g0] - origin_us) * 1e-6
        if (a - _first_knot(a, dt)) / dt <= 1.0 - EDGE_COVERAGE:
            break
        g0 += 1
    while g1 - g0 > 1:
        b = ends[g0:g1].max()
        u = b / dt - np.floor(b / dt + 1e-9)
        # u == 0: the last control point has zero weight and never moves
        if u < 1e-9 or u >= EDGE_COVERAGE:
            break
        g1 -= 1
    return g0, g1


# ---------------------------------------------------------------------------
# stage 1


def _groups(features):
    """``[(t0_us, ids, centers)]`` per window, time ordered."""
    by_t = {}
    for f in features:
        by_t.setdefault(f.t0_us, []).append(f)
    out = []
    for t in sorted(by_t):
        fs = sorted(by_t[t], key=lambda f: f.grid_id)
        out.append((t, np.array([f.grid_id for f in fs]), np.array([f.center0 for f in fs])))
    return out


def _spread(n, k):
    """``k`` evenly spread indices out of ``n``."""
    if n <= k:
        return np.arange(n)
    return np.unique(np.rint(np.linspace(0, n - 1, k)).astype(int))


def init_stage1(traj, pattern, config=None):
    """Initial event intrinsics and control points.

    A subset of windows is calibrated as a planar target (closed-form
    intrinsics then joint refinement); every window then gets a planar pose
    and each spline is fitted to its windows' poses.

    Returns
    -------
    Intrinsics, SegmentedTrajectory (with initialized splines)
    """
    cfg = config or CalibConfig()
    world = pattern_world_points(pattern)
    per_piece = [[g for g in _groups(p.features) if len(g[1]) >= 4] for p in traj.pieces]
    flat = [g for gs in per_piece for g in gs]
    if len(flat) < 10:
        raise InitFailed(f"{len(flat)} windows with at least 4 features, need 10")
    pick = [flat[k] for k in _spread(len(flat), cfg.init_views)]
    intr, _, _ = calibrate_planar([(ids, px) for _, ids, px in pick], world)
    pieces = []
    for piece, gs in zip(traj.pieces, per_piece):
        times, Rs, ts = [], [], []
        for t_us, ids, px in gs:
            R, t = planar_pnp(intr, world[ids], px, refine=False)
            times.append(traj.rel(t_us))
            Rs.append(R)
            ts.append(t)
        s = piece.spline
        spline = fit_segment(s.t0, s.dt, s.n, np.array(times), np.array(Rs), np.array(ts))
        pieces.append(TrajectoryPiece(piece.a, piece.b, spline, piece.features))
    return intr, SegmentedTrajectory(traj.origin_us, traj.dt, pieces, traj.dropped_groups)


@dataclass
class _Stage1Data:
    """Per-piece arrays for the stage-1 residual (one row pair per sample)."""

    times: np.ndarray  # unique sample times
    inv: np.ndarray  # sample -> unique time
    points: np.ndarray  # world points per sample
    target: np.ndarray  # predicted feature center per sample


def _stage1_data(traj, piece, world, samples):
    f = piece.features
    t0 = traj.rel([x.t0_us for x in f])
    h = np.array([x.half_span for x in f])
    c0 = np.array([x.center0 for x in f])
    V = np.array([x.velocity for x in f])
    ids = np.array([x.grid_id for x in f])
    k = np.asarray(samples, dtype=float)
    tau = (t0[:, None] + k[None, :] * h[:, None]).ravel()
    off = (k[None, :] * h[:, None]).ravel()
    target = np.repeat(c0, len(k), axis=0) + off[:, None] * np.repeat(V, len(k), axis=0)
    times, inv = np.unique(tau, return_inverse=True)
    return _Stage1Data(times, inv, world[np.repeat(ids, len(k))], target)


def _project_rows(intr, pc):
    """Projection with Jacobians; points behind the camera get a flag residual."""
    uv, dp, dk = project(intr, pc, jacobians=True, strict=False)
    bad = ~np.isfinite(uv).all(axis=1)
    if np.any(bad):
        uv[bad] = np.nan
        dp[bad] = 0.0
        dk[bad] = 0.0
    return uv, dp, dk, bad


def _spline_point_jacobians(pj, u, P, G):
    """Jacobians of ``G @ (R(tau) P + t(tau))`` w.r.t. the 4 active control points.

    ``G`` is (M, 2, 3). Returns rotation and translation parts, each
    (M, 4, 2, 3).
    """
    GR = G @ pj.R[u]
    GRP = -GR @ so3.hat(P)
    d_rot = np.einsum("mab,mjbc->mjac", GRP, pj.d_eps[u])
    d_tr = pj.weights[u][:, :, None, None] * G[:, None, :, :]
    return d_rot, d_tr


def _csr_rows(row_blocks, n_cols):
    """CSR matrix from per-pair blocks with one fixed column layout.

    ``row_blocks`` is a list of ``(values (M, 2, c), first_col (M,))``; block
    columns are ``first_col + arange(c)`` and the blocks must appear in
    increasing column order within a row.
    """
    vals = np.concatenate([v for v, _ in row_blocks], axis=2)  # (M, 2, W)
    cols = np.concatenate(
        [c[:, None] + np.arange(v.shape[2])[None, :] for v, c in row_blocks], axis=1
    )  # (M, W)
    M, _, W = vals.shape
    indices = np.repeat(cols[:, None, :], 2, axis=1).reshape(-1)
    indptr = np.arange(0, 2 * M * W + 1, W)
    return sp.csr_matrix((vals.reshape(-1), indices, indptr), shape=(2 * M, n_cols))


class _Stage1Model:
    """Residual and sparse Jacobian of the stage-1 reprojection cost."""

    def __init__(self, traj, pattern, samples):
        self.traj = traj
        world = pattern_world_points(pattern)
        self.data = [_stage1_data(traj, p, world, samples) for p in traj.pieces]
        sizes = [6 * p.spline.n for p in traj.pieces]
        self.offsets = 6 + np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.n_cols = int(self.offsets[-1])

    def splines(self, values):
        """Splines from the block values ``[rot_0, trans_0, rot_1, ...]``."""
        out = []
        for k, p in enumerate(self.traj.pieces):
            out.append(SplineSegment(p.spline.t0, p.spline.dt, values[2 * k], values[2 * k + 1]))
        return out

    def evaluate(self, intr, splines, need_jac, col_shift=0):
        rs, mats = [], []
        for k, (seg, d) in enumerate(zip(splines, self.data)):
            pj = pose_jacobians(seg, d.times)
            u = d.inv
            R = pj.R[u]
            pc = np.einsum("mij,mj->mi", R, d.points) + pj.t[u]
            uv, dp, dk, bad = _project_rows(intr, pc)
            r = uv - d.target
            r[bad] = BEHIND_CAMERA_RESIDUAL
            rs.append(r.ravel())
            if need_jac:
                d_rot, d_tr = _spline_point_jacobians(pj, u, d.points, dp)
                span = pj.span[u]
                ro = col_shift + self.offsets[k] + 3 * span
                to = col_shift + self.offsets[k] + 3 * seg.n + 3 * span
                blocks = [(dk, np.full(len(u), col_shift))]
                blocks += [(d_rot[:, j], ro + 3 * j) for j in range(4)]
                blocks += [(d_tr[:, j], to + 3 * j) for j in range(4)]
                mats.append(_csr_rows(blocks, col_shift + self.n_cols))
        r = np.concatenate(rs)
        J = sp.vstack(mats, format="csr") if need_jac else None
        return r, J


@dataclass
class RpeStats:
    mean: float
    rms: float
    count: int

    @classmethod
    def from_residuals(cls, r):
        e = np.linalg.norm(np.asarray(r).reshape(-1, 2), axis=1)
        e = e[np.isfinite(e)]
        if e.size == 0:
            return cls(float("nan"), float("nan"), 0)
        return cls(float(e.mean()), float(np.sqrt(np.mean(e * e))), int(e.size))

    def to_dict(self):
        return {"mean_px": self.mean, "rms_px": self.rms, "count": self.count}


@dataclass
class Stage1Result:
    intrinsics: Intrinsics
    trajectory: SegmentedTrajectory
    report: nls.SolverReport
    rpe: RpeStats


def residual_stage1(intr, traj, pattern, samples=(0, 2)):
    """Stacked reprojection residuals of all pieces (2 per feature sample)."""
    model = _Stage1Model(traj, pattern, samples)
    r, _ = model.evaluate(intr, [p.spline for p in traj.pieces], False)
    return r


def _solver_options(cfg):
    return nls.SolverOptions(max_iterations=cfg.max_iterations, function_tolerance=cfg.function_tolerance)


def _stage1_blocks(intr, traj, constant=False):
    k = intr.as_array() if isinstance(intr, Intrinsics) else np.asarray(intr, dtype=float)
    blocks = [nls.ParameterBlock(k, constant=constant, name="event_intrinsics")]
    for k, p in enumerate(traj.pieces):
        blocks.append(nls.ParameterBlock(p.spline.rot_cps, nls.ROTATION, constant, f"rot_{k}"))
        blocks.append(nls.ParameterBlock(p.spline.trans_cps, constant=constant, name=f"trans_{k}"))
    return blocks


def _with_splines(traj, splines):
    pieces = [TrajectoryPiece(p.a, p.b, s, p.features) for p, s in zip(traj.pieces, splines)]
    return SegmentedTrajectory(traj.origin_us, traj.dt, pieces, traj.dropped_groups)


def optimize_stage1(intr, traj, pattern, config=None):
    """Jointly refine event intrinsics and all control points (Huber LM)."""
    cfg = config or CalibConfig()
    model = _Stage1Model(traj, pattern, cfg.samples)
    blocks = _stage1_blocks(intr, traj)

    def evaluate(values, need_jac):
        try:
            splines = model.splines(values[1:])
        except InvalidArgumentError:
            return np.full(model_size, np.nan), None
        return model.evaluate(values[0], splines, need_jac)

    model_size = sum(2 * len(d.inv) for d in model.data)
    prob = nls.Problem(blocks, evaluate, residual_block_size=2)
    report = nls.solve(prob, nls.huber(cfg.huber_delta), _solver_options(cfg))
    values = prob.values()
    intr_hat = Intrinsics.from_array(values[0])
    splines = model.splines(values[1:])
    r, _ = model.evaluate(values[0], splines, False)
    return Stage1Result(intr_hat, _with_splines(traj, splines), report, RpeStats.from_residuals(r))


def run_stage1(features, pattern, config=None, split=True, origin_us=None):
    cfg = config or CalibConfig()
    traj = segment_trajectory(
        features, cfg.knot_interval, cfg.min_features_per_segment, cfg.min_knots, origin_us, split
    )
    intr0, traj = init_stage1(traj, pattern, cfg)
    return optimize_stage1(intr0, traj, pattern, cfg)


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2State:
    intrinsics: Intrinsics  # frame camera
    R_ef: np.ndarray  # event -> frame rotation
    t_ef: np.ndarray
    time_offset: float  # s, t_event = t_frame + t_d


@dataclass
class _FramePoints:
    """Flattened frame observations assigned to trajectory pieces."""

    frame: np.ndarray  # index into the observation list
    t_rel: np.ndarray  # frame time relative to origin (s), before t_d
    piece: np.ndarray
    points: np.ndarray  # world points
    uv: np.ndarray


def _select_frames(traj, observations, world, td, guard):
    t_rel = traj.rel([o.t_us for o in observations])
    piece = traj.piece_index(t_rel + td, guard)
    fr, tr, pc, P, uv = [], [], [], [], []
    for k, o in enumerate(observations):
        if piece[k] < 0:
            continue
        m = len(o.ids)
        fr.append(np.full(m, k))
        tr.append(np.full(m, t_rel[k]))
        pc.append(np.full(m, piece[k]))
        P.append(world[o.ids])
        uv.append(o.uv)
    if not fr:
        return None
    return _FramePoints(
        np.concatenate(fr), np.concatenate(tr), np.concatenate(pc), np.concatenate(P), np.concatenate(uv)
    )


def init_stage2(stage1, observations, pattern, config=None):
    """Frame intrinsics (planar calibration), t_d = 0 and extrinsics from the
    frame/feature pair closest in time.

    Raises
    ------
    InitFailed
        Without frames that overlap the trajectory pieces in time.
    """
    cfg = config or CalibConfig()
    traj = stage1.trajectory
    world = pattern_world_points(pattern)
    usable = [o for o in observations if len(o.ids) >= 4]
    if len(usable) < 3:
        raise InitFailed(f"{len(usable)} frame observations with at least 4 points, need 3")
    t_rel = traj.rel([o.t_us for o in usable])
    piece = traj.piece_index(t_rel, cfg.guard_knots * traj.dt)
    if not np.any(piece >= 0):
        raise InitFailed("no frame observation overlaps the event trajectory in time")
    pick = [usable[k] for k in _spread(len(usable), cfg.init_views)]
    intr, _, _ = calibrate_planar([(o.ids, o.uv) for o in pick], world)

    feature_t = np.unique(np.concatenate([traj.rel([f.t0_us for f in p.features]) for p in traj.pieces]))
    cand = np.flatnonzero(piece >= 0)
    j = np.clip(np.searchsorted(feature_t, t_rel[cand]), 1, len(feature_t) - 1)
    gap = np.minimum(np.abs(feature_t[j] - t_rel[cand]), np.abs(feature_t[j - 1] - t_rel[cand]))
    k = cand[int(np.argmin(gap))]
    o = usable[k]
    R_f, t_f = planar_pnp(intr, world[o.ids], o.uv)
    seg = traj.pieces[piece[k]].spline
    pj = pose_jacobians(seg, np.array([t_rel[k]]))
    R_e, t_e = pj.R[0], pj.t[0]
    R_ef = R_f @ R_e.T
    t_ef = t_f - R_ef @ t_e
    return Stage2State(intr, so3.project_to_rotation(R_ef), t_ef, 0.0)


class _Stage2Model:
    def __init__(self, traj, points):
        self.traj = traj
        self.pts = points

    def evaluate(self, k_f, R_ef, t_ef, td, splines, need_jac, joint_cols=None):
        """Residuals and Jacobian columns ``[K_f, R_ef, t_ef, t_d]`` (dense).

        With ``joint_cols`` (a :class:`_Stage1Model`), also returns sparse
        blocks for the spline control points, offset past the first 13 columns.
        """
        pts = self.pts
        n = len(pts.frame)
        tau = pts.t_rel + td
        R = np.empty((n, 3, 3))
        t = np.empty((n, 3))
        omega = np.empty((n, 3))
        vel = np.empty((n, 3))
        pjs = []
        for k, seg in enumerate(splines):
            m = pts.piece == k
            if not np.any(m):
                pjs.append(None)
                continue
            times, inv = np.unique(tau[m], return_inverse=True)
            pj = pose_jacobians(seg, times)
            R[m], t[m], omega[m], vel[m] = pj.R[inv], pj.t[inv], pj.omega[inv], pj.velocity[inv]
            pjs.append((m, pj, inv))
        q = np.einsum("mij,mj->mi", R, pts.points) + t
        pf = q @ R_ef.T + t_ef
        uv, dp, dk, bad = _project_rows(k_f, pf)
        r = uv - pts.uv
        r[bad] = BEHIND_CAMERA_RESIDUAL
        if not need_jac:
            return r.ravel(), None, None
        G = dp @ R_ef  # d uv / d q
        J = np.zeros((n, 2, 13))
        J[:, :, :6] = dk
        J[:, :, 6:9] = -G @ so3.hat(q)
        J[:, :, 9:12] = dp
        # d q / d t_d = R (omega x P) + v
        dq = np.einsum("mij,mj->mi", R, np.cross(omega, pts.points)) + vel
        J[:, :, 12] = np.einsum("mij,mj->mi", G, dq)
        Jsp = None
        if joint_cols is not None:
            mats = []
            order = []
            for k, item in enumerate(pjs):
                if item is None:
                    continue
                m, pj, inv = item
                rows = np.flatnonzero(m)
                d_rot, d_tr = _spline_point_jacobians(pj, inv, pts.points[m], G[m])
                span = pj.span[inv]
                seg = splines[k]
                base = 13 + joint_cols.offsets[k]
                ro = base + 3 * span
                to = base + 3 * seg.n + 3 * span
                blocks = [(d_rot[:, j], ro + 3 * j) for j in range(4)]
                blocks += [(d_tr[:, j], to + 3 * j) for j in range(4)]
                mats.append(_csr_rows(blocks, 13 + joint_cols.n_cols))
                order.append(rows)
            Jsp = sp.vstack(mats, format="csr")
            # restore the observation order of the rows
            perm = np.argsort(np.concatenate(order))
            row_perm = (2 * perm[:, None] + np.arange(2)).ravel()
            Jsp = Jsp[row_perm]
        return r.ravel(), J.reshape(2 * n, 13), Jsp


@dataclass
class Stage2Result:
    state: Stage2State
    report: nls.SolverReport
    rpe: RpeStats
    used_observations: int
    skipped_observations: int
    frame_times_us: list
    stage1: Stage1Result = None  # updated stage 1 when refined jointly


def residual_stage2(state, traj, observations, pattern, guard=0.0):
    """Frame reprojection residuals; observations outside the pieces are skipped.

    Returns ``(residuals, used_count)``.
    """
    world = pattern_world_points(pattern)
    pts = _select_frames(traj, observations, world, state.time_offset, guard)
    if pts is None:
        return np.zeros(0), 0
    model = _Stage2Model(traj, pts)
    r, _, _ = model.evaluate(
        state.intrinsics, state.R_ef, state.t_ef, state.time_offset, [p.spline for p in traj.pieces], False
    )
    return r, len(np.unique(pts.frame))


def jacobian_time_offset(state, traj, observations, pattern):
    """Analytic ``d residual / d t_d`` for every observed point, shape (n, 2)."""
    world = pattern_world_points(pattern)
    pts = _select_frames(traj, observations, world, state.time_offset, 0.0)
    if pts is None:
        return np.zeros((0, 2))
    model = _Stage2Model(traj, pts)
    _, J, _ = model.evaluate(
        state.intrinsics, state.R_ef, state.t_ef, state.time_offset, [p.spline for p in traj.pieces], True
    )
    return J[:, 12].reshape(-1, 2)


def optimize_stage2(stage1, state, observations, pattern, config=None, freeze_td=False, joint=False):
    """Refine frame intrinsics, extrinsics and t_d against the fixed trajectory.

    With ``joint=True`` the event intrinsics and control points are
    released as well and the stage-1 residuals are added to the cost.
    Observations are re-selected after each pass so that the guard band
    follows the current t_d.
    """
    cfg = config or CalibConfig()
    traj = stage1.trajectory
    world = pattern_world_points(pattern)
    guard = cfg.guard_knots * traj.dt
    intr_e = stage1.intrinsics
    report = None
    selected = None
    for _ in range(max(1, cfg.stage2_passes)):
        pts = _select_frames(traj, observations, world, state.time_offset, guard)
        if pts is None:
            raise InitFailed("no frame observation falls inside the trajectory pieces")
        key = tuple(np.unique(pts.frame))
        if key == selected:
            break
        selected = key
        model = _Stage2Model(traj, pts)
        blocks = [
            nls.ParameterBlock(state.intrinsics.as_array(), name="frame_intrinsics"),
            nls.ParameterBlock(state.R_ef, nls.ROTATION, name="R_ef"),
            nls.ParameterBlock(state.t_ef, name="t_ef"),
            nls.ParameterBlock([state.time_offset], constant=freeze_td, name="t_d"),
        ]
        fixed_splines = [p.spline for p in traj.pieces]
        if joint:
            s1 = _Stage1Model(traj, pattern, cfg.samples)
            blocks += _stage1_blocks(intr_e, traj)
            n1 = sum(2 * len(d.inv) for d in s1.data)
        n2 = 2 * len(pts.frame)

        def evaluate(values, need_jac):
            k_f, R_ef, t_ef, td = values[0], values[1], values[2], float(values[3][0])
            if abs(td) > cfg.td_max:
                return np.full(n2 + (n1 if joint else 0), np.nan), None
            try:
                splines = s1.splines(values[5:]) if joint else fixed_splines
                r2, J2, J2s = model.evaluate(
                    k_f, R_ef, t_ef, td, splines, need_jac, s1 if joint else None
                )
            except (OutOfRangeError, InvalidArgumentError):
                return np.full(n2 + (n1 if joint else 0), np.nan), None
            if not joint:
                return r2, J2
            r1, J1 = s1.evaluate(values[4], splines, need_jac, col_shift=13)
            r = np.concatenate([r2, r1])
            if not need_jac:
                return r, None
            dense = sp.hstack([sp.csr_matrix(J2), sp.csr_matrix((n2, J2s.shape[1] - 13))])
            return r, sp.vstack([dense + J2s, J1], format="csr")

        prob = nls.Problem(blocks, evaluate, residual_block_size=2)
        report = nls.solve(prob, nls.huber(cfg.huber_delta), _solver_options(cfg))
        v = prob.values()
        state = Stage2State(Intrinsics.from_array(v[0]), v[1], v[2], float(v[3][0]))
        if joint:
            intr_e = Intrinsics.from_array(v[4])
            traj = _with_splines(traj, s1.splines(v[5:]))

    pts = _select_frames(traj, observations, world, state.time_offset, guard)
    model = _Stage2Model(traj, pts)
    r, _, _ = model.evaluate(
        state.intrinsics, state.R_ef, state.t_ef, state.time_offset, [p.spline for p in traj.pieces], False
    )
    used = np.unique(pts.frame)
    s1_out = None
    if joint:
        r1 = residual_stage1(intr_e, traj, pattern, cfg.samples)
        s1_out = Stage1Result(intr_e, traj, stage1.report, RpeStats.from_residuals(r1))
    return Stage2Result(
        state,
        report,
        RpeStats.from_residuals(r),
        int(len(used)),
        int(len(observations) - len(used)),
        [int(observations[k].t_us) for k in used],
        s1_out,
    )


# ---------------------------------------------------------------------------
# driver and report


@dataclass
class CalibrationReport:
    pattern: PatternGeometry
    event_intrinsics: Intrinsics
    origin_us: int
    knot_interval: float
    splines: list  # SplineSegment per piece, times relative to origin_us
    segments: list  # piece summaries
    stage1_rpe: RpeStats
    stage1_solver: dict
    frame_intrinsics: Intrinsics = None
    R_ef: np.ndarray = None
    t_ef: np.ndarray = None
    time_offset: float = None  # s
    stage2_rpe: RpeStats = None
    stage2_solver: dict = None
    frames_used: int = 0
    frames_skipped: int = 0
    frame_times_us: list = field(default_factory=list)
    options: dict = field(default_factory=dict)

    @property
    def has_stage2(self):
        return self.frame_intrinsics is not None

    def event_pose(self, t_rel):
        """Event-camera pose at relative time(s); NaN outside the fitted pieces."""
        t_rel = np.atleast_1d(np.asarray(t_rel, dtype=float))
        R = np.full(t_rel.shape + (3, 3), np.nan)
        t = np.full(t_rel.shape + (3,), np.nan)
        for k, seg in enumerate(self.splines):
            m = seg.contains(t_rel)
            if k < len(self.segments):
                # the spline domain can extend past the data it was fitted to
                a, b = self.segments[k]["start_s"], self.segments[k]["end_s"]
                m &= (t_rel >= a - 1e-9) & (t_rel <= b + 1e-9)
            if np.any(m):
                pj = pose_jacobians(seg, t_rel[m])
                R[m], t[m] = pj.R, pj.t
        return R, t

    def to_dict(self):
        d = {
            "schema_version": SCHEMA_VERSION,
            "clock_convention": CLOCK_CONVENTION,
            "pattern": self.pattern.to_dict(),
            "event_intrinsics": self.event_intrinsics.to_dict(),
            "origin_us": self.origin_us,
            "knot_interval_s": self.knot_interval,
            "trajectory": [segment_to_dict(s) for s in self.splines],
            "segments": self.segments,
            "stage1": {"rpe": self.stage1_rpe.to_dict(), "solver": self.stage1_solver},
            "options": self.options,
        }
        if self.has_stage2:
            d["frame_intrinsics"] = self.frame_intrinsics.to_dict()
            d["extrinsics_event_to_frame"] = {
                "rotation_wxyz": so3.to_quaternion(self.R_ef).tolist(),
                "translation_m": np.asarray(self.t_ef).tolist(),
            }
            d["time_offset_us"] = self.time_offset * 1e6
            d["stage2"] = {
                "rpe": self.stage2_rpe.to_dict(),
                "solver": self.stage2_solver,
                "frames_used": self.frames_used,
                "frames_skipped": self.frames_skipped,
                "frame_times_us": list(self.frame_times_us),
            }
        return d

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise InvalidArgumentError(f"unsupported report schema version {version!r}")

        def rpe(x):
            return RpeStats(float(x["mean_px"]), float(x["rms_px"]), int(x["count"]))

        out = cls(
            pattern=PatternGeometry.from_dict(d["pattern"]),
            event_intrinsics=Intrinsics(**d["event_intrinsics"]),
            origin_us=int(d["origin_us"]),
            knot_interval=float(d["knot_interval_s"]),
            splines=[segment_from_dict(s) for s in d["trajectory"]],
            segments=list(d.get("segments", [])),
            stage1_rpe=rpe(d["stage1"]["rpe"]),
            stage1_solver=dict(d["stage1"].get("solver", {})),
            options=dict(d.get("options", {})),
        )
        if "frame_intrinsics" in d:
            ext = d["extrinsics_event_to_frame"]
            out.frame_intrinsics = Intrinsics(**d["frame_intrinsics"])
            out.R_ef = so3.from_quaternion(np.asarray(ext["rotation_wxyz"], dtype=float))
            out.t_ef = np.asarray(ext["translation_m"], dtype=float)
            out.time_offset = float(d["time_offset_us"]) * 1e-6
            s2 = d["stage2"]
            out.stage2_rpe = rpe(s2["rpe"])
            out.stage2_solver = dict(s2.get("solver", {}))
            out.frames_used = int(s2.get("frames_used", 0))
            out.frames_skipped = int(s2.get("frames_skipped", 0))
            out.frame_times_us = [int(t) for t in s2.get("frame_times_us", [])]
        return out


def calibrate(
    features,
    observations,
    pattern,
    config=None,
    stage1_only=False,
    joint=False,
    freeze_td=False,
    piecewise=True,
    origin_us=None,
    stage1=None,
):
    """Run stage 1 and (unless ``stage1_only``) stage 2.

    ``piecewise=False`` fits one spline across all features regardless of
    gaps; ``freeze_td`` keeps t_d at 0. Both exist for ablations. A
    :class:`Stage1Result` from an earlier run may be passed as ``stage1`` to
    reuse it with different frame data.
    """
    cfg = config or CalibConfig()
    s1 = stage1 or run_stage1(features, pattern, cfg, split=piecewise, origin_us=origin_us)
    traj = s1.trajectory
    options = {
        "stage1_only": bool(stage1_only),
        "joint_refine": bool(joint),
        "freeze_time_offset": bool(freeze_td),
        "piecewise": bool(piecewise),
        "samples": list(cfg.samples),
    }
    report = CalibrationReport(
        pattern=pattern,
        event_intrinsics=s1.intrinsics,
        origin_us=traj.origin_us,
        knot_interval=traj.dt,
        splines=[p.spline for p in traj.pieces],
        segments=[p.summary() for p in traj.pieces],
        stage1_rpe=s1.rpe,
        stage1_solver=s1.report.to_dict(),
        options=options,
    )
    if stage1_only:
        return report
    state = init_stage2(s1, observations, pattern, cfg)
    s2 = optimize_stage2(s1, state, observations, pattern, cfg, freeze_td=freeze_td, joint=joint)
    if s2.stage1 is not None:
        report.event_intrinsics = s2.stage1.intrinsics
        report.splines = [p.spline for p in s2.stage1.trajectory.pieces]
        report.stage1_rpe = s2.stage1.rpe
    report.frame_intrinsics = s2.state.intrinsics
    report.R_ef = s2.state.R_ef
    report.t_ef = s2.state.t_ef
    report.time_offset = s2.state.time_offset
    report.stage2_rpe = s2.rpe
    report.stage2_solver = s2.report.to_dict()
    report.frames_used = s2.used_observations
    report.frames_skipped = s2.skipped_observations
    report.frame_times_us = s2.frame_times_us
    return report


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class ReferencePoses:
    """World-to-frame-camera poses at frame-clock timestamps."""

    t_us: np.ndarray
    R: np.ndarray
    t: np.ndarray


def truth_reference(truth, t_us):
    t_us = np.asarray(t_us, dtype=np.int64)
    keep = truth.spline.contains(t_us * 1e-6 + truth.time_offset)
    R, t = truth.frame_pose(t_us[keep] * 1e-6)
    return ReferencePoses(t_us[keep], R, t)


def pnp_reference(intr, observations, pattern):
    """Frame-side reference poses from planar PnP of each observation."""
    world = pattern_world_points(pattern)
    ts, Rs, tr = [], [], []
    for o in observations:
        if len(o.ids) < 4:
            continue
        R, t = planar_pnp(intr, world[o.ids], o.uv)
        ts.append(o.t_us)
        Rs.append(R)
        tr.append(t)
    if not ts:
        return ReferencePoses(np.zeros(0, np.int64), np.zeros((0, 3, 3)), np.zeros((0, 3)))
    return ReferencePoses(np.array(ts, dtype=np.int64), np.array(Rs), np.array(tr))


@dataclass
class Metrics:
    e_t_mm: float
    e_r_deg: float  # difference of absolute rotation angles
    e_r_geodesic_deg: float  # angle of the relative rotation (not the literal metric)
    frames: int
    rpe_event_px: float
    rpe_frame_px: float = float("nan")
    delta_td_ms: float = float("nan")
    event_intrinsics_error: dict = None
    frame_intrinsics_error: dict = None
    extrinsic_rotation_deg: float = float("nan")
    extrinsic_translation_mm: float = float("nan")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def pose_errors(report, reference):
    """Per-frame translation (m) and rotation errors (rad) between the
    estimated event trajectory and reference frame poses mapped through the
    estimated extrinsics. Frames outside the trajectory pieces are dropped.

    Returns ``(e_t, e_r_literal, e_r_geodesic)`` arrays.
    """
    if not report.has_stage2:
        raise InvalidArgumentError("pose errors need a report with stage 2 results")
    tau = (np.asarray(reference.t_us, dtype=np.int64) - report.origin_us) * 1e-6 + report.time_offset
    R_est, t_est = report.event_pose(tau)
    ok = np.isfinite(t_est[:, 0])
    R_est, t_est = R_est[ok], t_est[ok]
    R_fe = report.R_ef.T
    R_ref = R_fe @ reference.R[ok]
    t_ref = (reference.t[ok] - report.t_ef) @ R_fe.T
    e_t = np.linalg.norm(t_est - t_ref, axis=1)
    e_r = np.abs(so3.rotation_angle(R_est) - so3.rotation_angle(R_ref))
    e_g = so3.rotation_angle(np.swapaxes(R_est, -1, -2) @ R_ref)
    return e_t, e_r, e_g


def _intrinsics_error(est, ref):
    a, b = est.as_array(), ref.as_array()
    names = ("fx", "fy", "cx", "cy", "k1", "k2")
    out = {n: float(x - y) for n, x, y in zip(names, a, b)}
    out["fx_rel"] = float((a[0] - b[0]) / b[0])
    out["fy_rel"] = float((a[1] - b[1]) / b[1])
    return out


def evaluate(report, reference, truth=None):
    """Pose metrics against reference frame poses, plus parameter errors when
    the ground truth is known.

    Raises
    ------
    InvalidArgumentError
        On an empty reference set, a report without stage 2, or a pattern
        that differs from the ground truth's.
    """
    if truth is not None and truth.pattern.to_dict() != report.pattern.to_dict():
        raise InvalidArgumentError("report and ground truth use different patterns")
    if len(reference.t_us) == 0:
        raise InvalidArgumentError("empty reference pose set")
    e_t, e_r, e_g = pose_errors(report, reference)
    if e_t.size == 0:
        raise InvalidArgumentError("no reference pose falls inside the estimated trajectory")
    m = Metrics(
        e_t_mm=float(np.mean(e_t) * 1e3),
        e_r_deg=float(np.degrees(np.mean(e_r))),
        e_r_geodesic_deg=float(np.degrees(np.mean(e_g))),
        frames=int(e_t.size),
        rpe_event_px=report.stage1_rpe.mean,
        rpe_frame_px=report.stage2_rpe.mean,
    )
    if truth is not None:
        m.delta_td_ms = (report.time_offset - truth.time_offset) * 1e3
        m.event_intrinsics_error = _intrinsics_error(report.event_intrinsics, truth.event_intrinsics)
        m.frame_intrinsics_error = _intrinsics_error(report.frame_intrinsics, truth.frame_intrinsics)
        m.extrinsic_rotation_deg = float(np.degrees(so3.rotation_angle(report.R_ef.T @ truth.R_ef)))
        m.extrinsic_translation_mm = float(np.linalg.norm(report.t_ef - truth.t_ef) * 1e3)
    return m


def event_residuals(report, features, samples=(0, 2)):
    """Per-sample stage-1 residuals of ``features`` under a report.

    Returns ``(t_rel, grid_id, residual (n, 2))`` for samples inside the
    report's trajectory pieces.
    """
    world = pattern_world_points(report.pattern)
    k = np.asarray(samples, dtype=float)
    t0 = (np.array([f.t0_us for f in features], dtype=np.int64) - report.origin_us) * 1e-6
    h = np.array([f.half_span for f in features])
    tau = (t0[:, None] + k * h[:, None]).ravel()
    ids = np.repeat([f.grid_id for f in features], len(k))
    target = np.repeat([f.center0 for f in features], len(k), axis=0) + (k * h[:, None]).ravel()[:, None] * np.repeat(
        [f.velocity for f in features], len(k), axis=0
    )
    R, t = report.event_pose(tau)
    ok = np.isfinite(t[:, 0])
    pc = np.einsum("mij,mj->mi", R[ok], world[ids[ok]]) + t[ok]
    r = project(report.event_intrinsics, pc, strict=False) - target[ok]
    return tau[ok], ids[ok], r


def frame_residuals(report, observations):
    """Per-point stage-2 residuals; returns ``(t_us, grid_id, residual (n, 2))``."""
    world = pattern_world_points(report.pattern)
    t_us = np.concatenate([np.full(len(o.ids), o.t_us, dtype=np.int64) for o in observations])
    ids = np.concatenate([o.ids for o in observations])
    uv = np.concatenate([o.uv for o in observations])
    R, t = report.event_pose((t_us - report.origin_us) * 1e-6 + report.time_offset)
    ok = np.isfinite(t[:, 0])
    q = np.einsum("mij,mj->mi", R[ok], world[ids[ok]]) + t[ok]
    pf = q @ report.R_ef.T + report.t_ef
    r = project(report.frame_intrinsics, pf, strict=False) - uv[ok]
    return t_us[ok], ids[ok], r
