import numpy as np
import pytest

from evcal import synth
from evcal.calib import CalibConfig, run_stage1
from evcal.features import recognize_stream


@pytest.mark.slow
def test_events_to_intrinsics():
    """Simulated events -> recognition -> stage 1 recovers the event intrinsics."""
    cfg = synth.SimConfig(duration=1.0, seed=0)
    truth = synth.generate_trajectory(cfg)
    stream = synth.simulate_events(truth, cfg)
    feats, stats = recognize_stream(stream, truth.pattern, resolution=truth.event_resolution)
    assert stats.recognized >= 0.5 * stats.windows
    res = run_stage1(feats, truth.pattern, CalibConfig(min_features_per_segment=10))
    est, gt = res.intrinsics, truth.event_intrinsics
    print(f"event path: fx {est.fx:.2f}/{gt.fx:.2f} cx {est.cx:.2f}/{gt.cx:.2f} rpe {res.rpe.mean:.3f} px")
    assert abs(est.fx / gt.fx - 1) < 0.01 and abs(est.fy / gt.fy - 1) < 0.01
    assert abs(est.cx - gt.cx) < 6.0 and abs(est.cy - gt.cy) < 6.0
    assert res.rpe.mean < 0.5
    assert np.isfinite(est.k1) and np.isfinite(est.k2)
