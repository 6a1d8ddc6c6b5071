"""Per-window feature recognition: accumulate, denoise, extract, decode, refine."""

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgumentError, RecognitionFailed, RefineFailed
from . import conic
from .accumulate import accumulate
from .candidates import extract_candidates
from .decode import decode_pattern
from .refine import MovingEllipseFeature, refine_moving_ellipse
from .regions import label_regions, suppress_noise


@dataclass
class RecognizerConfig:
    window_us: int = 4000
    t_pc: float = 5.0
    min_region_size: int = 10
    t_fit: float = 1.2
    theta_tol: float = 60.0
    sim_min: float = 0.6
    pair_dist_factor: float = 1.5
    min_features: int = None  # default rows * cols - 2
    refine: bool = True

    def __post_init__(self):
        if self.window_us < 1:
            raise InvalidArgumentError("accumulation window must be at least 1 us")
        if not (self.t_pc > 0 and self.t_fit > 0 and 0 < self.theta_tol <= 180):
            raise InvalidArgumentError("t_pc and t_fit must be positive, theta_tol in (0, 180]")
        if not 0 <= self.sim_min < 1 or not self.pair_dist_factor > 0:
            raise InvalidArgumentError("sim_min must lie in [0, 1), pair_dist_factor be positive")
        if self.min_region_size < 1 or (self.min_features is not None and self.min_features < 4):
            raise InvalidArgumentError("min_region_size >= 1 and min_features >= 4 required")


@dataclass
class RecognitionStats:
    windows: int = 0
    recognized: int = 0
    features: int = 0
    failures: Counter = field(default_factory=Counter)

    def to_dict(self):
        return {
            "windows": self.windows,
            "recognized": self.recognized,
            "features": self.features,
            "failures": dict(sorted(self.failures.items())),
        }


def _candidate_events(frame, cands):
    """Events of the window that fall on each candidate's two arc regions."""
    w, h = frame.resolution
    pos_owner = np.full((h, w), -1, dtype=np.int64)
    neg_owner = np.full((h, w), -1, dtype=np.int64)
    for k, c in enumerate(cands):
        pos_owner[c.region_pos.ys, c.region_pos.xs] = k
        neg_owner[c.region_neg.ys, c.region_neg.xs] = k
    ev = frame.events
    owner = np.where(ev.p > 0, pos_owner[ev.y, ev.x], neg_owner[ev.y, ev.x])
    return [np.flatnonzero(owner == k) for k in range(len(cands))]


def recognize_frame(frame, pattern, config=None):
    """Features of one accumulation frame, sorted by grid id.

    Raises
    ------
    RecognitionFailed
        When the pattern cannot be found in this window.
    """
    cfg = config or RecognizerConfig()
    regions = suppress_noise(label_regions(frame), cfg.t_pc, cfg.min_region_size)
    cands = extract_candidates(
        regions,
        t_fit=cfg.t_fit,
        sim_min=cfg.sim_min,
        theta_tol=cfg.theta_tol,
        pair_dist_factor=cfg.pair_dist_factor,
    )
    min_features = cfg.min_features or pattern.size - 2
    dec = decode_pattern(cands, pattern, frame.events, min_features)
    half = frame.window * 0.5e-6
    owned = _candidate_events(frame, cands)
    ev = frame.events
    out = []
    for k, cand in enumerate(cands):
        if dec.ids[k] < 0:
            continue
        idx = owned[k]
        if cfg.refine:
            try:
                f = refine_moving_ellipse(ev.x[idx], ev.y[idx], ev.t[idx], frame.t_start, half, dec.ids[k])
            except RefineFailed:
                continue
        else:
            f = MovingEllipseFeature(frame.t_start, dec.ids[k], cand.coeffs, np.zeros(2), half, cand.e_fit)
        if not conic.is_ellipse(f.coeffs):
            continue
        out.append(f)
    if len(out) < min_features:
        raise RecognitionFailed(f"only {len(out)} features survived refinement")
    out.sort(key=lambda f: f.grid_id)
    return out


def recognize_stream(stream, pattern, config=None, t_start=None, t_end=None, resolution=None):
    """Tile the stream into windows and recognize each one.

    Returns the features of all recognized windows (time ordered) and
    per-window statistics.
    """
    cfg = config or RecognizerConfig()
    stats = RecognitionStats()
    if len(stream) == 0:
        return [], stats
    t_start = int(stream.t[0]) if t_start is None else int(t_start)
    t_end = int(stream.t[-1]) + 1 if t_end is None else int(t_end)
    feats = []
    for ws in range(t_start, t_end, cfg.window_us):
        stats.windows += 1
        frame = accumulate(stream, ws, cfg.window_us, resolution)
        if len(frame.events) == 0:
            stats.failures["empty"] += 1
            continue
        try:
            fs = recognize_frame(frame, pattern, cfg)
        except RecognitionFailed as exc:
            stats.failures[re.sub(r"\d+", "N", str(exc))] += 1
            continue
        stats.recognized += 1
        stats.features += len(fs)
        feats.extend(fs)
    return feats, stats
