import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from evcal import io
from evcal.cli import main

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = main([
        "synth", str(out), "--duration", "3", "--seed", "5", "--time-offset-ms", "2",
        "--no-events", "--oracle-features",
    ])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def report_path(synth_dir):
    out = synth_dir / "report.json"
    code = main([
        "calibrate", "--features", str(synth_dir / "features.csv"), "--frames", str(synth_dir / "frames.csv"),
        "--pattern", str(synth_dir / "pattern.json"), "-o", str(out), "--plot-dir", str(synth_dir / "cal_plots"),
    ])
    assert code == 0
    return out


def test_synth_outputs(synth_dir):
    for name in ("truth.json", "pattern.json", "frames.csv", "features.csv", "synth_config.json"):
        assert (synth_dir / name).is_file()
    assert not (synth_dir / "events.csv").exists()
    assert io.read_truth(synth_dir / "truth.json").time_offset == pytest.approx(2e-3)


def test_calibrate_and_evaluate(synth_dir, report_path, capsys):
    report = io.read_report(report_path)
    assert report.has_stage2 and report.time_offset == pytest.approx(2e-3, abs=1e-5)
    plots = synth_dir / "cal_plots"
    for name in ("segments.csv", "trajectory.csv", "trajectory.png", "residuals_event.csv", "residuals_frame.csv"):
        assert (plots / name).is_file()
    capsys.readouterr()
    metrics = synth_dir / "metrics.json"
    code = main([
        "evaluate", str(report_path), str(synth_dir / "truth.json"), "-o", str(metrics),
        "--plot-dir", str(synth_dir / "eval_plots"),
    ])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["passed"] and json.loads(metrics.read_text()) == doc
    for name in ("pose_errors.csv", "metrics.csv", "pose_errors.png"):
        assert (synth_dir / "eval_plots" / name).is_file()


def test_evaluate_tolerance_exit(synth_dir, report_path):
    code = main(["evaluate", str(report_path), str(synth_dir / "truth.json"), "--tol-et-mm", "0"])
    assert code == 1


def test_input_errors(synth_dir, tmp_path):
    base = ["calibrate", "--features", str(synth_dir / "features.csv"), "-o", str(tmp_path / "r.json")]
    assert main(base + ["--pattern", str(tmp_path / "missing.json"), "--stage1-only"]) == 2
    # frames are required for stage 2
    assert main(base + ["--pattern", str(synth_dir / "pattern.json")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("nonsense\n")
    assert main(["calibrate", "--events", str(bad), "--pattern", str(synth_dir / "pattern.json"),
                 "-o", str(tmp_path / "r.json"), "--stage1-only"]) == 2
    with pytest.raises(SystemExit):
        main(["calibrate", "--pattern", "p.json", "-o", "r.json"])


def test_stage1_only_report_cannot_be_evaluated(synth_dir, tmp_path):
    out = tmp_path / "r1.json"
    code = main([
        "calibrate", "--features", str(synth_dir / "features.csv"), "--pattern", str(synth_dir / "pattern.json"),
        "-o", str(out), "--stage1-only",
    ])
    assert code == 0 and not io.read_report(out).has_stage2
    assert main(["evaluate", str(out), str(synth_dir / "truth.json")]) == 2


def test_short_event_clip_fails_calibration(tmp_path):
    """The golden clip is recognized but far too short to calibrate."""
    shutil.copy(DATA / "clip_events.csv", tmp_path / "ev.csv")
    dump = tmp_path / "feats.csv"
    code = main([
        "calibrate", "--events", str(tmp_path / "ev.csv"), "--pattern", str(DATA / "pattern.json"),
        "-o", str(tmp_path / "r.json"), "--stage1-only", "--dump-features", str(dump),
    ])
    assert code == 3
    assert len(io.read_features_csv(dump)) == 12


def test_binary_events_and_console_entry(tmp_path):
    stream = io.read_events(DATA / "clip_events.csv")
    io.write_events(tmp_path / "ev.bin", stream)
    dump = tmp_path / "feats.csv"
    code = main([
        "calibrate", "--events", str(tmp_path / "ev.bin"), "--pattern", str(DATA / "pattern.json"),
        "-o", str(tmp_path / "r.json"), "--stage1-only", "--dump-features", str(dump),
    ])
    assert code == 3 and len(io.read_features_csv(dump)) == 12
    res = subprocess.run([sys.executable, "-m", "evcal.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "calibrate" in res.stdout
