from pathlib import Path

import numpy as np
import pytest

from evcal import io
from evcal.calib import FrameObservation
from evcal.camera import PatternGeometry
from evcal.errors import ParseError
from evcal.events import EventStream
from evcal.features import recognize_stream
from evcal.features.refine import MovingEllipseFeature

DATA = Path(__file__).parent / "data"


def small_stream():
    return EventStream([5, 7, 7, 100], [1, 2, 3, 4], [0, 1, 2, 3], [1, -1, 1, -1], (10, 10))


def assert_same_stream(a, b):
    for name in "txyp":
        assert np.array_equal(getattr(a, name), getattr(b, name))


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
def test_events_round_trip(tmp_path, suffix):
    path = tmp_path / f"ev{suffix}"
    io.write_events(path, small_stream())
    assert_same_stream(io.read_events(path, (10, 10)), small_stream())


def test_empty_events(tmp_path):
    io.write_events_csv(tmp_path / "e.csv", EventStream.empty())
    assert len(io.read_events(tmp_path / "e.csv")) == 0


def test_csv_errors_report_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t_us,x,y,p\n1,2,3,1\n2,2,x,1\n")
    with pytest.raises(ParseError) as exc:
        io.read_events_csv(p)
    assert exc.value.line == 3
    p.write_text("t_us,x,y,p\n1,2,3,1\n2,2,3\n")
    with pytest.raises(ParseError) as exc:
        io.read_events_csv(p)
    assert exc.value.line == 3
    p.write_text("t_us,x,y,p\n5,2,3,1\n2,2,3,1\n")
    with pytest.raises(ParseError, match="non-decreasing") as exc:
        io.read_events_csv(p)
    assert exc.value.line == 3
    p.write_text("t_us,x,y,p\n5,2,3,0\n")
    with pytest.raises(ParseError, match="polarity"):
        io.read_events_csv(p)
    p.write_text("time,x,y,p\n")
    with pytest.raises(ParseError, match="header"):
        io.read_events_csv(p)
    p.write_text("t_us,x,y,p\n1,20,3,1\n")
    with pytest.raises(ParseError, match="outside"):
        io.read_events_csv(p, (10, 10))
    with pytest.raises(ParseError):
        io.read_events_csv(tmp_path / "missing.csv")


def test_binary_truncated(tmp_path):
    p = tmp_path / "ev.bin"
    io.write_events_binary(p, small_stream())
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(ParseError, match="truncated") as exc:
        io.read_events_binary(p)
    assert exc.value.offset == len(io.BINARY_MAGIC) + 3 * io.EVENT_DTYPE.itemsize
    p.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(ParseError):
        io.read_events_binary(p)


def test_frames_round_trip(tmp_path):
    obs = [
        FrameObservation(1000, [0, 3, 5], [[1.5, 2.25], [3.0, 4.0], [0.1, 1e-7]]),
        FrameObservation(34333, [2], [[7.0, 8.0]]),
    ]
    io.write_frames_csv(tmp_path / "f.csv", obs)
    back = io.read_frames_csv(tmp_path / "f.csv")
    assert [o.t_us for o in back] == [1000, 34333]
    assert np.array_equal(back[0].ids, [0, 3, 5]) and np.array_equal(back[0].uv, obs[0].uv)
    (tmp_path / "g.csv").write_text("frame_ts_us,grid_id,u,v\n1,2,3.0,4.0\n1,2,5.0,6.0\n")
    with pytest.raises(ParseError, match="unique"):
        io.read_frames_csv(tmp_path / "g.csv")


def test_features_round_trip(tmp_path):
    f = MovingEllipseFeature(123, 4, [0.5, 0.01, 0.5, -50, -60, 2500.0], [12.5, -3.25], 0.002, 0.4)
    io.write_features_csv(tmp_path / "f.csv", [f])
    (g,) = io.read_features_csv(tmp_path / "f.csv")
    assert (g.t0_us, g.grid_id, g.half_span, g.e_fit) == (123, 4, 0.002, 0.4)
    assert np.array_equal(g.coeffs, f.coeffs) and np.array_equal(g.velocity, f.velocity)


def test_json_documents(tmp_path):
    p = PatternGeometry(rows=4, cols=5)
    io.write_pattern(tmp_path / "p.json", p)
    assert io.read_pattern(tmp_path / "p.json") == p
    (tmp_path / "bad.json").write_text("{\n  \"rows\": 3,\n")
    with pytest.raises(ParseError) as exc:
        io.read_pattern(tmp_path / "bad.json")
    assert exc.value.line is not None
    (tmp_path / "p2.json").write_text('{"rows": 3}')
    with pytest.raises(ParseError):
        io.read_pattern(tmp_path / "p2.json")
    (tmp_path / "t.json").write_text('{"schema_version": 7}')
    with pytest.raises(ParseError, match="schema"):
        io.read_truth(tmp_path / "t.json")


def test_golden_clip_recognition():
    """Frozen event clip must still produce the frozen features."""
    pattern = io.read_pattern(DATA / "pattern.json")
    truth = io.read_truth(DATA / "truth.json")
    stream = io.read_events(DATA / "clip_events.csv", truth.event_resolution)
    expected = io.read_features_csv(DATA / "clip_features.csv")
    got, stats = recognize_stream(stream, pattern, resolution=truth.event_resolution)
    assert stats.windows == 2 and len(got) == len(expected) == 12
    for a, b in zip(got, expected):
        assert (a.t0_us, a.grid_id) == (b.t0_us, b.grid_id)
        assert np.allclose(a.center0, b.center0, atol=1e-6)
        assert np.allclose(a.velocity, b.velocity, atol=1e-3)
