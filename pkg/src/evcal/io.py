"""File formats: event CSV/binary, frame observations, features, JSON documents.

Timestamps are integer microseconds in every file.
"""

import csv
import io
import json
from pathlib import Path

import numpy as np

from .calib import CalibrationReport, FrameObservation
from .camera import PatternGeometry
from .errors import InvalidArgumentError, ParseError
from .events import EventStream
from .features.refine import MovingEllipseFeature
from .synth import TRUTH_SCHEMA_VERSION, GroundTruth

EVENTS_HEADER = ["t_us", "x", "y", "p"]
FRAMES_HEADER = ["frame_ts_us", "grid_id", "u", "v"]
FEATURES_HEADER = [
    "t0_us",
    "grid_id",
    "cx",
    "cy",
    "vx",
    "vy",
    "alpha",
    "beta",
    "gamma",
    "eta",
    "eps",
    "zeta",
    "e_fit",
    "half_span_us",
]
BINARY_MAGIC = b"EVCALEV1"
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])  # 13 bytes, packed


def _check_header(path, line, expected):
    got = [c.strip() for c in line.rstrip("\r\n").split(",")]
    if got != expected:
        raise ParseError(f"expected header {','.join(expected)!r}, got {line.strip()!r}", path=path, line=1)


def _locate_bad_row(path, lines, ncols, kinds):
    """Line number and message of the first malformed data row."""
    for k, raw in enumerate(lines, start=2):
        if not raw.strip():
            continue
        cells = raw.rstrip("\r\n").split(",")
        if len(cells) != ncols:
            return k, f"expected {ncols} fields, got {len(cells)}"
        for c, kind in zip(cells, kinds):
            try:
                kind(c)
            except ValueError:
                return k, f"cannot parse {c.strip()!r}"
    return None, "malformed data"


def _read_table(path, header, kinds):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc.strerror}", path=path) from exc
    first, _, body = text.partition("\n")
    if not first:
        raise ParseError("file is empty", path=path, line=1)
    _check_header(path, first, header)
    if not body.strip():
        return np.zeros((0, len(header)))
    try:
        table = np.loadtxt(io.StringIO(body), delimiter=",", dtype=float, ndmin=2)
        if table.shape[1] != len(header):
            raise ValueError
    except ValueError:
        line, msg = _locate_bad_row(path, body.splitlines(), len(header), kinds)
        raise ParseError(msg, path=path, line=line) from None
    return table


def _as_int(path, col, name, table):
    v = table[:, col]
    if np.any(v != np.round(v)):
        row = int(np.flatnonzero(v != np.round(v))[0])
        raise ParseError(f"{name} must be an integer", path=path, line=row + 2)
    return v.astype(np.int64)


# ---------------------------------------------------------------------------
# events


def write_events_csv(path, stream):
    with open(path, "w", newline="") as f:
        f.write(",".join(EVENTS_HEADER) + "\n")
        if len(stream):
            np.savetxt(f, np.stack([stream.t, stream.x, stream.y, stream.p], axis=1), fmt="%d", delimiter=",")


def read_events_csv(path, resolution=None):
    table = _read_table(path, EVENTS_HEADER, (int, int, int, int))
    t = _as_int(path, 0, "t_us", table)
    x, y, p = (_as_int(path, k, n, table) for k, n in ((1, "x"), (2, "y"), (3, "p")))
    bad = np.flatnonzero(np.abs(p) != 1)
    if bad.size:
        raise ParseError("polarity must be -1 or 1", path=path, line=int(bad[0]) + 2)
    back = np.flatnonzero(np.diff(t) < 0)
    if back.size:
        raise ParseError("timestamps must be non-decreasing", path=path, line=int(back[0]) + 3)
    return _stream(path, t, x, y, p, resolution)


def _stream(path, t, x, y, p, resolution):
    try:
        return EventStream(t, x, y, p, resolution)
    except InvalidArgumentError as exc:
        raise ParseError(str(exc), path=path) from exc


def write_events_binary(path, stream):
    """Magic ``EVCALEV1`` followed by packed little-endian 13-byte records."""
    rec = np.empty(len(stream), dtype=EVENT_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    with open(path, "wb") as f:
        f.write(BINARY_MAGIC)
        f.write(rec.tobytes())


def read_events_binary(path, resolution=None):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc.strerror}", path=path) from exc
    if raw[: len(BINARY_MAGIC)] != BINARY_MAGIC:
        raise ParseError("not an evcal binary event file", path=path, offset=0)
    body = len(raw) - len(BINARY_MAGIC)
    size = EVENT_DTYPE.itemsize
    if body % size:
        start = len(BINARY_MAGIC) + (body // size) * size
        raise ParseError(f"truncated record ({body % size} of {size} bytes)", path=path, offset=start)
    rec = np.frombuffer(raw, dtype=EVENT_DTYPE, offset=len(BINARY_MAGIC))
    p = rec["p"].astype(np.int8)
    bad = np.flatnonzero(np.abs(p) != 1)
    if bad.size:
        raise ParseError("polarity must be -1 or 1", path=path, offset=len(BINARY_MAGIC) + int(bad[0]) * size)
    t = rec["t"].astype(np.int64)
    back = np.flatnonzero(np.diff(t) < 0)
    if back.size:
        raise ParseError(
            "timestamps must be non-decreasing", path=path, offset=len(BINARY_MAGIC) + int(back[0] + 1) * size
        )
    return _stream(path, t, rec["x"], rec["y"], p, resolution)


def read_events(path, resolution=None):
    """Binary when the file starts with the magic bytes, CSV otherwise."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            head = f.read(len(BINARY_MAGIC))
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc.strerror}", path=path) from exc
    if head == BINARY_MAGIC:
        return read_events_binary(path, resolution)
    return read_events_csv(path, resolution)


def write_events(path, stream):
    if Path(path).suffix.lower() in (".bin", ".evb"):
        write_events_binary(path, stream)
    else:
        write_events_csv(path, stream)


# ---------------------------------------------------------------------------
# frame observations and features


def write_frames_csv(path, observations):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(FRAMES_HEADER)
        for o in observations:
            for j, (u, v) in zip(o.ids, o.uv):
                w.writerow([o.t_us, int(j), repr(float(u)), repr(float(v))])


def read_frames_csv(path):
    table = _read_table(path, FRAMES_HEADER, (int, int, float, float))
    t = _as_int(path, 0, "frame_ts_us", table)
    ids = _as_int(path, 1, "grid_id", table)
    if np.any(ids < 0):
        raise ParseError("grid ids must be non-negative", path=path, line=int(np.flatnonzero(ids < 0)[0]) + 2)
    out = []
    if not len(t):
        return out
    order = np.argsort(t, kind="stable")
    t, ids, uv = t[order], ids[order], table[order, 2:4]
    cuts = np.flatnonzero(np.diff(t)) + 1
    for a, b in zip(np.r_[0, cuts], np.r_[cuts, len(t)]):
        try:
            out.append(FrameObservation(int(t[a]), ids[a:b], uv[a:b]))
        except InvalidArgumentError as exc:
            raise ParseError(f"frame {int(t[a])}: {exc}", path=path) from exc
    return out


def write_features_csv(path, features):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(FEATURES_HEADER)
        for ft in features:
            vals = [*ft.center0, *ft.velocity, *ft.coeffs, ft.e_fit]
            w.writerow([ft.t0_us, ft.grid_id, *(repr(float(v)) for v in vals), int(round(ft.half_span * 1e6))])


def read_features_csv(path):
    table = _read_table(path, FEATURES_HEADER, (int, int) + (float,) * 11 + (int,))
    t0 = _as_int(path, 0, "t0_us", table)
    ids = _as_int(path, 1, "grid_id", table)
    half = _as_int(path, 13, "half_span_us", table)
    out = []
    for k in range(len(t0)):
        out.append(
            MovingEllipseFeature(
                int(t0[k]), int(ids[k]), table[k, 6:12], table[k, 4:6], half[k] * 1e-6, float(table[k, 12])
            )
        )
    return out


# ---------------------------------------------------------------------------
# JSON documents


def write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    path = Path(path)
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc.strerror}", path=path) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from exc


def write_pattern(path, pattern):
    write_json(path, pattern.to_dict())


def read_pattern(path):
    try:
        return PatternGeometry.from_dict(read_json(path))
    except (KeyError, TypeError, InvalidArgumentError) as exc:
        raise ParseError(f"invalid pattern description: {exc}", path=path) from exc


def write_report(path, report):
    write_json(path, report.to_dict())


def read_report(path):
    try:
        return CalibrationReport.from_dict(read_json(path))
    except (KeyError, TypeError, InvalidArgumentError) as exc:
        raise ParseError(f"invalid calibration report: {exc}", path=path) from exc


def write_truth(path, truth):
    doc = truth.to_dict()
    doc["schema_version"] = TRUTH_SCHEMA_VERSION
    write_json(path, doc)


def read_truth(path):
    doc = read_json(path)
    if doc.get("schema_version") != TRUTH_SCHEMA_VERSION:
        raise ParseError(f"unsupported ground-truth schema version {doc.get('schema_version')!r}", path=path)
    try:
        return GroundTruth.from_dict(doc)
    except (KeyError, TypeError, InvalidArgumentError) as exc:
        raise ParseError(f"invalid ground truth: {exc}", path=path) from exc
