import numpy as np
import pytest
from conftest import random_spline
from hypothesis import given
from hypothesis import strategies as st

from evcal import so3
from evcal.errors import InvalidArgumentError, OutOfRangeError
from evcal.spline import (
    SplineSegment,
    basis,
    cumulative_basis,
    eval_rotation,
    eval_rotation_rate,
    eval_translation,
    eval_velocity,
    fit_segment,
    pose_jacobians,
    segment_from_dict,
    segment_to_dict,
)


def cox_de_boor(i, k, t, knots):
    """Textbook recursive B-spline basis N_{i,k}(t) (order k, degree k - 1)."""
    if k == 1:
        return 1.0 if knots[i] <= t < knots[i + 1] else 0.0
    out = 0.0
    d1 = knots[i + k - 1] - knots[i]
    d2 = knots[i + k] - knots[i + 1]
    if d1 > 0:
        out += (t - knots[i]) / d1 * cox_de_boor(i, k - 1, t, knots)
    if d2 > 0:
        out += (knots[i + k] - t) / d2 * cox_de_boor(i + 1, k - 1, t, knots)
    return out


def test_basis_matches_cox_de_boor():
    knots = np.arange(-3.0, 5.0)
    for u in np.linspace(0.0, 0.999, 37):
        expected = [cox_de_boor(j, 4, u, knots) for j in range(4)]
        assert np.allclose(basis(u), expected, atol=1e-14)


def test_cumulative_basis_is_tail_sum():
    u = np.linspace(0, 1, 11, endpoint=False)
    b = basis(u)
    cb, _ = cumulative_basis(u)
    assert np.allclose(cb, np.cumsum(b[:, ::-1], axis=1)[:, ::-1], atol=1e-15)


def test_partition_of_unity_1e12():
    u = np.random.default_rng(0).uniform(0, 1, 100000)
    cb, dcb = cumulative_basis(u, dt=0.012)
    assert np.max(np.abs(basis(u).sum(axis=1) - 1.0)) < 1e-12
    assert np.max(np.abs(cb[:, 0] - 1.0)) < 1e-12
    assert np.max(np.abs(dcb[:, 0])) < 1e-12


def test_cumulative_basis_derivative_fd():
    u = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    _, d = cumulative_basis(u, dt=0.5)
    fd = (cumulative_basis(u + h)[0] - cumulative_basis(u - h)[0]) / (2 * h) / 0.5
    assert np.allclose(d, fd, atol=1e-8)


def test_constant_spline_reproduces_pose():
    R = so3.so3_exp([0.1, 0.2, 0.3])
    seg = SplineSegment(0.0, 0.1, np.repeat(R[None], 5, 0), np.tile([1.0, 2.0, 3.0], (5, 1)))
    tau = np.linspace(0, seg.t_end - 1e-9, 17)
    assert np.allclose(eval_rotation(seg, tau), R, atol=1e-12)
    assert np.allclose(eval_translation(seg, tau), [1, 2, 3])
    _, w = eval_rotation_rate(seg, tau)
    assert np.allclose(w, 0.0, atol=1e-12)
    assert np.allclose(eval_velocity(seg, tau), 0.0)


def test_domain_is_half_open():
    seg = random_spline(np.random.default_rng(0), n=6, dt=0.1, t0=1.0)
    assert seg.t_end == pytest.approx(1.3)
    eval_rotation(seg, 1.0)
    with pytest.raises(OutOfRangeError):
        eval_rotation(seg, seg.t_end)
    with pytest.raises(OutOfRangeError):
        eval_translation(seg, 0.999)
    assert list(seg.contains([0.99, 1.0, 1.29, 1.3])) == [False, True, True, False]


def test_segment_validation():
    with pytest.raises(InvalidArgumentError):
        SplineSegment(0.0, 0.1, np.repeat(np.eye(3)[None], 3, 0), np.zeros((3, 3)))
    with pytest.raises(InvalidArgumentError):
        SplineSegment(0.0, 0.0, np.repeat(np.eye(3)[None], 4, 0), np.zeros((4, 3)))
    with pytest.raises(InvalidArgumentError):
        SplineSegment(0.0, 0.1, np.repeat(np.eye(3)[None], 4, 0), np.zeros((5, 3)))


def test_continuity_across_knots():
    seg = random_spline(np.random.default_rng(4), n=9, dt=0.05)
    knots = seg.t0 + seg.dt * np.arange(1, seg.n - 3)
    eps = 1e-9
    for fn in (eval_rotation, eval_translation, eval_velocity):
        assert np.allclose(fn(seg, knots - eps), fn(seg, knots), atol=1e-6)
    _, w0 = eval_rotation_rate(seg, knots - eps)
    _, w1 = eval_rotation_rate(seg, knots)
    assert np.allclose(w0, w1, atol=1e-6)


@given(st.integers(0, 10_000))
def test_rate_and_velocity_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    seg = random_spline(rng)
    tau = rng.uniform(seg.t0 + 1e-4, seg.t_end - 1e-4)
    h = 1e-6
    R, w = eval_rotation_rate(seg, tau)
    Rp, Rm = eval_rotation(seg, tau + h), eval_rotation(seg, tau - h)
    w_fd = so3.vee(R.T @ (Rp - Rm) / (2 * h))
    assert np.allclose(w, w_fd, rtol=1e-6, atol=1e-6)
    v_fd = (eval_translation(seg, tau + h) - eval_translation(seg, tau - h)) / (2 * h)
    assert np.allclose(eval_velocity(seg, tau), v_fd, rtol=1e-6, atol=1e-6)


def test_pose_jacobians_match_finite_differences():
    rng = np.random.default_rng(7)
    seg = random_spline(rng)
    tau = np.array([seg.t0 + 0.013, seg.t0 + 0.11, seg.t_end - 0.001])
    pj = pose_jacobians(seg, tau)
    h = 1e-6
    for s in range(len(tau)):
        i = pj.span[s]
        for k in range(4):
            for a in range(3):
                delta = np.zeros(3)
                delta[a] = h
                rot = seg.rot_cps.copy()
                rot[i + k] = rot[i + k] @ so3.so3_exp(delta)
                Rp = eval_rotation(seg.with_control_points(rot, seg.trans_cps), tau[s])
                rot[i + k] = seg.rot_cps[i + k] @ so3.so3_exp(-delta)
                Rm = eval_rotation(seg.with_control_points(rot, seg.trans_cps), tau[s])
                fd = (so3.so3_log(pj.R[s].T @ Rp) - so3.so3_log(pj.R[s].T @ Rm)) / (2 * h)
                assert np.allclose(pj.d_eps[s, k][:, a], fd, atol=1e-7)
            trans = seg.trans_cps.copy()
            trans[i + k] += 1.0
            dt = eval_translation(seg.with_control_points(seg.rot_cps, trans), tau[s]) - pj.t[s]
            assert np.allclose(dt, pj.weights[s, k], atol=1e-12)


def test_fit_segment_recovers_spline():
    rng = np.random.default_rng(3)
    truth = random_spline(rng, n=12, dt=0.05, rot_scale=0.1)
    times = np.linspace(truth.t0, truth.t_end - 1e-6, 200)
    fit = fit_segment(truth.t0, truth.dt, truth.n, times, eval_rotation(truth, times), eval_translation(truth, times))
    assert np.allclose(eval_translation(fit, times), eval_translation(truth, times), atol=1e-6)
    err = so3.rotation_angle(np.swapaxes(eval_rotation(fit, times), 1, 2) @ eval_rotation(truth, times))
    assert np.max(err) < 0.05


def test_serialization_round_trip():
    seg = random_spline(np.random.default_rng(5))
    back = segment_from_dict(segment_to_dict(seg))
    tau = np.linspace(seg.t0, seg.t_end - 1e-9, 13)
    assert np.allclose(eval_rotation(back, tau), eval_rotation(seg, tau), atol=1e-12)
    assert np.allclose(eval_translation(back, tau), eval_translation(seg, tau))
