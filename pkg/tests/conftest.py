import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from evcal import synth

settings.register_profile(
    "evcal", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("evcal")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_spline(rng, n=8, dt=0.05, t0=0.0, rot_scale=0.4, trans_scale=0.3):
    """Spline with random but well-conditioned control points."""
    from evcal.so3 import so3_exp
    from evcal.spline import SplineSegment

    rot = so3_exp(np.cumsum(rng.normal(0.0, rot_scale, (n, 3)), axis=0))
    trans = rng.normal(0.0, trans_scale, (n, 3)) + np.array([0.0, 0.0, 1.0])
    return SplineSegment(t0, dt, rot, trans)


@pytest.fixture(scope="session")
def short_truth():
    """Three seconds of noise-free synthetic motion with oracle features."""
    cfg = synth.SimConfig(duration=3.0, time_offset_ms=2.5)
    truth = synth.generate_trajectory(cfg)
    return cfg, truth, synth.oracle_features(truth, cfg), synth.simulate_frames(truth, cfg)


@pytest.fixture(scope="session")
def short_report(short_truth):
    from evcal.calib import calibrate

    cfg, truth, feats, frames = short_truth
    return calibrate(feats, frames, truth.pattern)


@pytest.fixture(scope="session")
def event_clip():
    """40 ms of simulated events (ten accumulation windows)."""
    cfg = synth.SimConfig(duration=1.0, seed=0)
    truth = synth.generate_trajectory(cfg)
    return cfg, truth, synth.simulate_events(truth, cfg, 0.2, 0.24)
