import numpy as np
import pytest
from scipy.special import ndtr

from evcal import synth
from evcal.camera import PatternGeometry, pattern_world_points, project
from evcal.errors import GenerationFailed, InvalidArgumentError
from evcal.spline import eval_rotation


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        synth.SimConfig(duration=0)
    with pytest.raises(InvalidArgumentError):
        synth.SimConfig(gaps=((2.0, 1.0),))
    with pytest.raises(InvalidArgumentError):
        synth.SimConfig(dark_intensity=1.0)
    cfg = synth.SimConfig(gaps=[[1, 2]], freq_range=[1, 2])
    assert cfg.gaps == ((1.0, 2.0),) and cfg.freq_range == (1.0, 2.0)


def test_signed_distance_regions():
    p = PatternGeometry()
    s, r, ri = p.spacing, p.circle_radius, p.inner_radius
    # ring between inner and outer radius is dark, outside is bright
    assert synth.is_dark(p, 0.5 * (r + ri), 0.0)
    assert synth.signed_distance(p, r + 0.005, 0.0) == pytest.approx(0.005)
    assert synth.signed_distance(p, s / 2, s / 2) > 0
    # crosspoint of feature (0, 0): dark upper-left and lower-right
    q = 0.3 * ri
    assert synth.is_dark(p, -q, -q) and synth.is_dark(p, q, q)
    assert not synth.is_dark(p, q, -q) and not synth.is_dark(p, -q, q)
    # neighbour (0, 1) is mirrored
    assert not synth.is_dark(p, s - q, -q) and synth.is_dark(p, s + q, -q)


def test_edge_levels_reproduce_log_steps():
    cfg = synth.SimConfig()
    d = synth.edge_levels(cfg, (5, 7), seed=1)
    # blurred step intensity at each level distance, in units of C above dark
    intensity = cfg.dark_intensity + (1 - cfg.dark_intensity) * ndtr(d / cfg.blur_px)
    steps = (np.log(intensity) - np.log(cfg.dark_intensity)) / cfg.contrast_threshold
    gaps = np.diff(steps, axis=-1)
    assert np.allclose(gaps[np.isfinite(gaps)], 1.0, atol=1e-9)
    assert np.all(np.isfinite(d[..., 1]))
    assert np.all(np.diff(d, axis=-1)[np.isfinite(gaps)] > 0)


def test_generate_trajectory_and_round_trip():
    cfg = synth.SimConfig(duration=2.0, time_offset_ms=-3.0, gaps=((0.5, 0.7),))
    truth = synth.generate_trajectory(cfg)
    assert truth.spline.t_end >= 2.0
    assert truth.time_offset == pytest.approx(-3e-3)
    back = synth.GroundTruth.from_dict(truth.to_dict())
    tau = np.linspace(0, 1.9, 20)
    assert np.allclose(eval_rotation(back.spline, tau), eval_rotation(truth.spline, tau), atol=1e-12)
    assert back.gaps == truth.gaps and back.time_offset == pytest.approx(truth.time_offset)
    assert synth.fov_coverage(truth) > 0.9


def test_generation_fails_without_visibility():
    with pytest.raises(GenerationFailed):
        synth.generate_trajectory(synth.SimConfig(duration=1.0, distance=0.05))


def test_baseline_sets_extrinsics():
    for name, b in synth.BASELINES.items():
        R_ef, t_ef = synth.frame_extrinsics(b)
        # frame camera center in event coordinates sits at x = baseline
        assert np.allclose(-R_ef.T @ t_ef, [b, 0, 0])


def test_frames_follow_clock_convention():
    cfg = synth.SimConfig(duration=1.0, time_offset_ms=5.0)
    truth = synth.generate_trajectory(cfg)
    frames = synth.simulate_frames(truth, cfg)
    world = pattern_world_points(truth.pattern)
    o = frames[10]
    R, t = truth.pose(o.t_us * 1e-6 + 5e-3)
    uv = project(truth.frame_intrinsics, (world @ R.T + t) @ truth.R_ef.T + truth.t_ef)
    assert np.allclose(o.uv, uv[o.ids], atol=1e-9)
    assert np.all(np.diff([f.t_us for f in frames]) > 0)


def test_oracle_features_are_exact_at_window_ends():
    cfg = synth.SimConfig(duration=1.0, gaps=((0.4, 0.5),))
    truth = synth.generate_trajectory(cfg)
    feats = synth.oracle_features(truth, cfg)
    world = pattern_world_points(truth.pattern)
    for f in feats[::97]:
        for off in (0.0, 2 * f.half_span):
            R, t = truth.pose(f.t0 + off)
            uv = project(truth.event_intrinsics, world[f.grid_id] @ R.T + t)
            assert np.allclose(f.center_at_offset(off), uv, atol=1e-9)
    t0 = np.array([f.t0 for f in feats])
    assert not np.any((t0 + 0.004 > 0.4) & (t0 < 0.5))


def test_events_are_consistent(event_clip):
    cfg, truth, stream = event_clip
    w, h = truth.event_resolution
    assert len(stream) > 10_000
    assert stream.t.min() >= 200_000 and stream.t.max() < 240_000
    assert np.all(np.diff(stream.t) >= 0)
    assert stream.x.max() < w and stream.y.max() < h
    assert set(np.unique(stream.p)) == {-1, 1}


def test_event_times_and_polarity_match_scene(event_clip):
    """At each event the pixel's blurred edge passes one of its levels, in the
    direction given by the polarity."""
    cfg, truth, stream = event_clip
    rays = synth.pixel_rays(truth, cfg.quantization, cfg.seed)
    levels = synth.edge_levels(cfg, rays.shape[:2], cfg.seed)
    focal = 0.5 * (truth.event_intrinsics.fx + truth.event_intrinsics.fy)
    rng = np.random.default_rng(0)
    pick = rng.choice(len(stream), 300, replace=False)
    good = 0
    for k in pick:
        x, y, t = stream.x[k], stream.y[k], stream.t[k] * 1e-6
        ts = np.array([t - 40e-6, t + 40e-6])
        R, tr = truth.pose(ts)
        d = synth._pixel_distance(truth.pattern, focal, rays[y, x][None], R, tr)[:, 0]
        lev = levels[y, x]
        crossed = np.any((lev >= min(d) - 1e-6) & (lev <= max(d) + 1e-6))
        good += crossed and np.sign(d[1] - d[0]) == stream.p[k]
    assert good >= 0.97 * len(pick)


def test_gaps_remove_events():
    cfg = synth.SimConfig(duration=1.0, gaps=((0.205, 0.21),))
    truth = synth.generate_trajectory(cfg)
    ev = synth.simulate_events(truth, cfg, 0.2, 0.215)
    assert len(ev) > 0
    assert not np.any((ev.t >= 205_000) & (ev.t < 210_000))


def test_events_deterministic():
    cfg = synth.SimConfig(duration=1.0)
    truth = synth.generate_trajectory(cfg)
    a = synth.simulate_events(truth, cfg, 0.3, 0.305)
    b = synth.simulate_events(truth, cfg, 0.3, 0.305)
    assert np.array_equal(a.t, b.t) and np.array_equal(a.x, b.x) and np.array_equal(a.p, b.p)


def test_clutter_and_jitter():
    cfg = synth.SimConfig(duration=1.0, clutter_rate=2000.0, jitter_us=5.0)
    truth = synth.generate_trajectory(cfg)
    base = synth.simulate_events(truth, synth.SimConfig(duration=1.0), 0.3, 0.31)
    noisy = synth.simulate_events(truth, cfg, 0.3, 0.31)
    assert len(noisy) > len(base)


def test_make_dataset_summary():
    cfg = synth.SimConfig(duration=0.3)
    ds = synth.make_dataset(cfg, events=False)
    s = ds.summary()
    assert s["events"] == 0 and s["frames"] == len(ds.frames) > 0
    assert synth.config_to_dict(cfg)["gaps"] == []
