from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from evcal import calib, nls, so3
from evcal.camera import PatternGeometry, pattern_world_points
from evcal.errors import CalibrationImpossible, InitFailed, InvalidArgumentError
from evcal.features.refine import MovingEllipseFeature


def fake_features(t0_us, n_ids=3, half_span=0.002):
    out = []
    for t in t0_us:
        for j in range(n_ids):
            out.append(MovingEllipseFeature(int(t), j, [0.5, 0, 0.5, -10, -10, 99.0], [0.0, 0.0], half_span))
    return out


def reference_segments(group_t_us, dt, min_groups, min_knots, half_span):
    """Linear scan over sorted window starts; returns (first, last) group times.

    Edge trimming is done in integer microseconds: a leading group is dropped
    while it starts past the middle of its knot span, a trailing one while the
    last window ends inside the first half of a span.
    """
    out = []
    start = 0
    dt_us, w_us = round(dt * 1e6), round(2e6 * half_span)
    origin = group_t_us[0]
    for k in range(1, len(group_t_us) + 1):
        if k == len(group_t_us) or (group_t_us[k] - group_t_us[k - 1]) * 1e-6 > dt:
            piece = list(group_t_us[start:k])
            start = k
            while len(piece) > 1 and 2 * ((piece[0] - origin) % dt_us) > dt_us:
                piece.pop(0)
            while len(piece) > 1 and 0 < 2 * ((piece[-1] - origin + w_us) % dt_us) < dt_us:
                piece.pop()
            a = (piece[0] - group_t_us[0]) * 1e-6
            b = (piece[-1] - group_t_us[0]) * 1e-6 + 2 * half_span
            knots = int(np.floor((b - dt * np.floor(a / dt + 1e-9)) / dt)) + 4
            if len(piece) >= min_groups and knots >= min_knots:
                out.append((piece[0], piece[-1]))
    return out


@given(st.lists(st.integers(1, 40), min_size=2, max_size=80), st.sampled_from([0.008, 0.012, 0.02]))
def test_segmentation_matches_linear_scan(steps_ms, dt):
    t = np.cumsum(np.array(steps_ms) * 1000)
    t = t - t[0] + 1_000_000
    try:
        traj = calib.segment_trajectory(fake_features(t), dt, min_features=3, min_knots=6)
    except CalibrationImpossible:
        assert reference_segments(t, dt, 3, 6, 0.002) == []
        return
    got = [(p.features[0].t0_us, p.features[-1].t0_us) for p in traj.pieces]
    assert got == reference_segments(t, dt, 3, 6, 0.002)
    for p in traj.pieces:
        s = p.spline
        assert s.t0 <= p.a and p.b < s.t_end
        assert np.isclose(s.t0 / dt, np.round(s.t0 / dt))  # global lattice
        assert np.all(s.contains(traj.rel([f.t0_us for f in p.features])))
        # outer control points keep a basis weight of at least (1/2)^3 / 6
        assert (p.a - s.t0) / dt <= 0.5 + 1e-9
        u_end = p.b / dt - np.floor(p.b / dt + 1e-9)
        assert u_end < 1e-9 or u_end >= 0.5 - 1e-9


def test_segmentation_knot_never_after_first_feature():
    # 0.564 / 0.012 rounds up to 47 and 47 * 0.012 > 0.564 in floating point
    t = np.concatenate([np.arange(0, 100_000, 4000), np.arange(564_000, 700_000, 4000)])
    traj = calib.segment_trajectory(fake_features(t), 0.012, min_features=10)
    for p in traj.pieces:
        assert p.spline.t0 <= p.a
        assert p.spline.contains(p.a)


def test_segmentation_single_piece_and_errors():
    t = np.concatenate([np.arange(0, 200_000, 4000), np.arange(400_000, 600_000, 4000)])
    assert len(calib.segment_trajectory(fake_features(t), 0.012, 10).pieces) == 2
    assert len(calib.segment_trajectory(fake_features(t), 0.012, 10, split=False).pieces) == 1
    with pytest.raises(CalibrationImpossible):
        calib.segment_trajectory([], 0.012)
    with pytest.raises(CalibrationImpossible):
        calib.segment_trajectory(fake_features(t[:5]), 0.012, 10)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        calib.CalibConfig(knot_interval=0)
    with pytest.raises(InvalidArgumentError):
        calib.CalibConfig(samples=())
    with pytest.raises(InvalidArgumentError):
        calib.CalibConfig(min_knots=3)
    with pytest.raises(InvalidArgumentError):
        calib.FrameObservation(0, [1, 1], [[0, 0], [1, 1]])
    with pytest.raises(InvalidArgumentError):
        calib.FrameObservation(0, [1, 2], [[0, 0]])


# ---------------------------------------------------------------------------
# analytic Jacobians against finite differences


@pytest.fixture(scope="module")
def perturbed_stage1(short_truth):
    cfg, truth, feats, frames = short_truth
    sub = [f for f in feats if f.t0_us < 400_000]
    traj = calib.segment_trajectory(sub, 0.012, min_features=10)
    intr0, traj = calib.init_stage1(traj, truth.pattern)
    rng = np.random.default_rng(0)
    pieces = []
    for p in traj.pieces:
        s = p.spline
        rot = s.rot_cps @ so3.so3_exp(rng.normal(0, 0.01, (s.n, 3)))
        tr = s.trans_cps + rng.normal(0, 0.002, (s.n, 3))
        pieces.append(calib.TrajectoryPiece(p.a, p.b, s.with_control_points(rot, tr), p.features))
    traj = calib.SegmentedTrajectory(traj.origin_us, traj.dt, pieces)
    return truth, intr0, traj, frames


def test_stage1_jacobian(perturbed_stage1):
    truth, intr0, traj, _ = perturbed_stage1
    model = calib._Stage1Model(traj, truth.pattern, (0, 1, 2))
    blocks = calib._stage1_blocks(intr0, traj)
    prob = nls.Problem(blocks, lambda v, j: model.evaluate(v[0], model.splines(v[1:]), j), 2)
    r, J = prob.evaluate(prob.values(), True)
    assert sp.issparse(J) and J.shape == (r.size, prob.tangent_size)
    assert J.getnnz() == 30 * r.size  # 6 intrinsics + 4 x 3 rotation + 4 x 3 translation per row
    assert nls.check_jacobian(prob, step=1e-6) < 1e-5


def test_stage2_jacobians_including_joint(perturbed_stage1):
    truth, intr0, traj, frames = perturbed_stage1
    world = pattern_world_points(truth.pattern)
    pts = calib._select_frames(traj, frames, world, 0.0025, 0.03)
    model = calib._Stage2Model(traj, pts)
    s1 = calib._Stage1Model(traj, truth.pattern, (0, 2))
    blocks = [
        nls.ParameterBlock(truth.frame_intrinsics.as_array()),
        nls.ParameterBlock(truth.R_ef, nls.ROTATION),
        nls.ParameterBlock(truth.t_ef),
        nls.ParameterBlock([0.0025]),
    ] + calib._stage1_blocks(intr0, traj)

    def evaluate(v, need_jac):
        splines = s1.splines(v[5:])
        r, J, Js = model.evaluate(v[0], v[1], v[2], float(v[3][0]), splines, need_jac, s1)
        if not need_jac:
            return r, None
        dense = sp.hstack([sp.csr_matrix(J), sp.csr_matrix((len(r), Js.shape[1] - 13))])
        return r, dense + Js

    prob = nls.Problem(blocks, evaluate, 2)
    # intrinsics of the event camera do not enter the frame residual
    assert nls.check_jacobian(prob, step=1e-6) < 1e-5


# ---------------------------------------------------------------------------
# end to end on a short noise-free dataset


def test_short_noise_free_calibration(short_truth, short_report):
    cfg, truth, feats, frames = short_truth
    rep = short_report
    assert np.allclose(rep.event_intrinsics.as_array(), truth.event_intrinsics.as_array(), atol=1e-6)
    assert rep.stage1_rpe.mean < 1e-6
    assert abs(rep.time_offset - truth.time_offset) < 1e-6
    assert so3.rotation_angle(rep.R_ef.T @ truth.R_ef) < 1e-6
    assert np.linalg.norm(rep.t_ef - truth.t_ef) < 1e-6
    m = calib.evaluate(rep, calib.truth_reference(truth, rep.frame_times_us), truth)
    assert m.e_t_mm < 1e-3 and m.e_r_deg < 1e-4 and m.e_r_geodesic_deg < 1e-4
    assert m.frames == rep.frames_used
    _, _, r = calib.event_residuals(rep, feats)
    assert np.max(np.abs(r)) < 1e-6
    _, _, r = calib.frame_residuals(rep, frames)
    assert np.max(np.abs(r)) < 1e-5


def test_report_round_trip(short_report):
    back = calib.CalibrationReport.from_dict(short_report.to_dict())
    assert back.event_intrinsics == short_report.event_intrinsics
    assert back.time_offset == pytest.approx(short_report.time_offset, abs=1e-12)
    tau = np.linspace(0.1, 2.5, 30)
    R0, t0 = short_report.event_pose(tau)
    R1, t1 = back.event_pose(tau)
    assert np.allclose(R0, R1, atol=1e-12) and np.allclose(t0, t1, atol=1e-12)
    R, t = back.event_pose([-1.0, 1e6])
    assert np.all(np.isnan(t))
    bad = short_report.to_dict()
    bad["schema_version"] = 99
    with pytest.raises(InvalidArgumentError):
        calib.CalibrationReport.from_dict(bad)


def test_time_shift_invariance(short_truth):
    """Moving every timestamp by the same amount leaves the estimate unchanged."""
    cfg, truth, feats, frames = short_truth
    shift = 123_456_789
    sub = [f for f in feats if f.t0_us < 1_000_000]
    moved = [MovingEllipseFeature(f.t0_us + shift, f.grid_id, f.coeffs, f.velocity, f.half_span) for f in sub]
    a = calib.run_stage1(sub, truth.pattern)
    b = calib.run_stage1(moved, truth.pattern)
    assert np.allclose(a.intrinsics.as_array(), b.intrinsics.as_array(), atol=1e-9)


def test_three_sample_set_runs(short_truth):
    cfg, truth, feats, _ = short_truth
    sub = [f for f in feats if f.t0_us < 1_000_000]
    s1 = calib.run_stage1(sub, truth.pattern, calib.CalibConfig(samples=(0, 1, 2)))
    assert abs(s1.intrinsics.fx / truth.event_intrinsics.fx - 1) < 1e-3
    assert s1.rpe.mean < 0.05


def test_stage1_only_and_pnp_reference(short_truth, short_report):
    cfg, truth, feats, frames = short_truth
    s1 = calib.run_stage1([f for f in feats if f.t0_us < 1_000_000], truth.pattern)
    only = calib.calibrate([], frames, truth.pattern, stage1_only=True, stage1=s1)
    assert not only.has_stage2 and "frame_intrinsics" not in only.to_dict()
    with pytest.raises(InvalidArgumentError):
        calib.pose_errors(only, calib.truth_reference(truth, [o.t_us for o in frames]))
    ref = calib.pnp_reference(truth.frame_intrinsics, frames, truth.pattern)
    gt = calib.truth_reference(truth, ref.t_us)
    assert np.allclose(ref.t, gt.t, atol=1e-9)
    assert np.max(so3.rotation_angle(np.swapaxes(ref.R, 1, 2) @ gt.R)) < 1e-9
    m = calib.evaluate(short_report, ref)
    assert m.e_t_mm < 1e-3 and np.isnan(m.delta_td_ms)


def test_stage2_errors(short_truth, short_report):
    cfg, truth, feats, frames = short_truth
    s1 = calib.run_stage1([f for f in feats if f.t0_us < 1_000_000], truth.pattern)
    late = [o for o in frames if o.t_us > 2_000_000]
    with pytest.raises(InitFailed):
        calib.init_stage2(s1, late, truth.pattern)
    with pytest.raises(InitFailed):
        calib.init_stage2(s1, frames[:2], truth.pattern)
    other = replace(truth, pattern=PatternGeometry(rows=4, cols=5))
    with pytest.raises(InvalidArgumentError):
        calib.evaluate(short_report, calib.truth_reference(truth, short_report.frame_times_us), other)
    empty = calib.ReferencePoses(np.zeros(0, np.int64), np.zeros((0, 3, 3)), np.zeros((0, 3)))
    with pytest.raises(InvalidArgumentError):
        calib.evaluate(short_report, empty)


def test_time_offset_bound(short_truth):
    """An offset outside +-td_max is never accepted."""
    cfg, truth, feats, frames = short_truth
    s1 = calib.run_stage1([f for f in feats if f.t0_us < 2_000_000], truth.pattern)
    shifted = [calib.FrameObservation(o.t_us + 300_000, o.ids, o.uv) for o in frames]
    try:
        rep = calib.calibrate([], shifted, truth.pattern, calib.CalibConfig(td_max=0.01), stage1=s1)
    except InitFailed:
        return
    assert abs(rep.time_offset) <= 0.01


def test_no_features():
    with pytest.raises(CalibrationImpossible):
        calib.calibrate([], [], PatternGeometry())


def test_rpe_stats():
    s = calib.RpeStats.from_residuals(np.array([3.0, 4.0, 0.0, 0.0, np.nan, 1.0]))
    assert s.mean == pytest.approx(2.5) and s.count == 2
    assert calib.RpeStats.from_residuals(np.zeros(0)).count == 0
