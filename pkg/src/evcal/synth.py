"""Synthetic ground truth: trajectories, events, frame observations, features.

The camera moves on a smooth band-limited path in front of the pattern and
looks at a wandering target point near its center. The path is stored as a
cumulative B-spline whose control points are samples of the analytic
motion, so the spline itself is the exact ground truth.

Every feature is a dark disk on a white background with a crosspoint of
alternating quadrants inside ``inner_radius``. Each pixel sees the pattern
through one ray; its intensity is a Gaussian-blurred step of the signed
distance to the nearest dark/bright boundary. An event fires whenever the
log intensity passes a multiple of the contrast threshold (brighter is
positive). Crossing times come from the signed distance sampled with exact
poses on a fine sub-step grid and interpolated linearly in between.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri

from . import so3
from .camera import (
    EVENT_RESOLUTION,
    FRAME_RESOLUTION,
    CameraGeometry,
    Intrinsics,
    PatternGeometry,
    pattern_world_points,
    pixel_to_normalized,
    project,
)
from .calib import FrameObservation
from .errors import GenerationFailed, InvalidArgumentError
from .events import EventStream
from .features.refine import MovingEllipseFeature
from .spline import SplineSegment, eval_rotation, eval_translation, segment_from_dict, segment_to_dict

EVENT_GT_INTRINSICS = (413.84, 413.80, 157.42, 132.25, -0.38, 0.31)
FRAME_GT_INTRINSICS = (1120.0, 1118.0, 641.3, 509.7, -0.12, 0.09)
BASELINES = {"narrow": 0.04, "regular": 0.08, "wide": 0.15}
SUBSTEPS = 16
TRUTH_SCHEMA_VERSION = 1


@dataclass
class SimConfig:
    duration: float = 40.0  # s
    seed: int = 0
    knot_interval: float = 0.012  # s, ground-truth spline
    distance: float = 0.5  # m, nominal camera-to-target distance
    amp_target: float = 0.06  # m, target wander in the pattern plane
    amp_distance: float = 0.06  # m
    amp_azimuth: float = 0.45  # rad
    amp_elevation: float = 0.35  # rad
    amp_roll: float = 0.4  # rad
    freq_range: tuple = (1.0, 2.0)  # Hz
    gaps: tuple = ()  # ((start, end), ...) in s, event camera occluded
    contrast_threshold: float = 0.35  # log intensity step per event
    dark_intensity: float = 0.2  # relative to white = 1
    blur_px: float = 0.5  # Gaussian edge blur (sigma)
    jitter_us: float = 0.0
    quantization: bool = True  # random sample point inside each pixel
    clutter_rate: float = 0.0  # straight clutter segments per second
    sim_step_us: int = 250
    frame_rate: float = 30.0  # Hz
    frame_noise_px: float = 0.0
    event_noise_px: float = 0.0  # noise on oracle feature centers
    time_offset_ms: float = 0.0  # t_event = t_frame + t_d
    baseline_m: float = 0.08
    event_intrinsics: tuple = EVENT_GT_INTRINSICS
    frame_intrinsics: tuple = FRAME_GT_INTRINSICS
    event_resolution: tuple = EVENT_RESOLUTION
    frame_resolution: tuple = FRAME_RESOLUTION

    def __post_init__(self):
        if not self.duration > 0:
            raise InvalidArgumentError("duration must be positive")
        if not self.contrast_threshold > 0:
            raise InvalidArgumentError("contrast threshold must be positive")
        if not 0 < self.dark_intensity < 1:
            raise InvalidArgumentError("dark intensity must lie in (0, 1)")
        if not self.blur_px > 0:
            raise InvalidArgumentError("blur must be positive")
        if not self.knot_interval > 0 or not self.frame_rate > 0:
            raise InvalidArgumentError("knot interval and frame rate must be positive")
        if self.sim_step_us < 1:
            raise InvalidArgumentError("simulation step must be at least 1 us")
        self.gaps = tuple(tuple(float(v) for v in g) for g in self.gaps)
        self.freq_range = tuple(float(v) for v in self.freq_range)
        self.event_intrinsics = tuple(float(v) for v in self.event_intrinsics)
        self.frame_intrinsics = tuple(float(v) for v in self.frame_intrinsics)
        self.event_resolution = tuple(int(v) for v in self.event_resolution)
        self.frame_resolution = tuple(int(v) for v in self.frame_resolution)
        for a, b in self.gaps:
            if not b > a:
                raise InvalidArgumentError("gap end must follow its start")


@dataclass
class GroundTruth:
    event_intrinsics: Intrinsics
    frame_intrinsics: Intrinsics
    R_ef: np.ndarray  # event -> frame camera rotation
    t_ef: np.ndarray
    time_offset: float  # s
    spline: SplineSegment  # world -> event camera
    pattern: PatternGeometry
    gaps: tuple = ()
    event_resolution: tuple = EVENT_RESOLUTION
    frame_resolution: tuple = FRAME_RESOLUTION
    duration: float = 0.0

    def pose(self, t):
        return eval_rotation(self.spline, t), eval_translation(self.spline, t)

    def frame_pose(self, t_frame):
        """World-to-frame-camera pose at frame-clock time(s)."""
        R, t = self.pose(np.asarray(t_frame) + self.time_offset)
        return self.R_ef @ R, t @ self.R_ef.T + self.t_ef

    def in_gap(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=bool)
        for a, b in self.gaps:
            out |= (t >= a) & (t < b)
        return out

    def to_dict(self):
        return {
            "event_intrinsics": self.event_intrinsics.to_dict(),
            "frame_intrinsics": self.frame_intrinsics.to_dict(),
            "extrinsics_event_to_frame": {
                "rotation_wxyz": so3.to_quaternion(self.R_ef).tolist(),
                "translation_m": np.asarray(self.t_ef).tolist(),
            },
            "time_offset_us": self.time_offset * 1e6,
            "clock_convention": "t_event = t_frame + t_d",
            "trajectory": segment_to_dict(self.spline),
            "pattern": self.pattern.to_dict(),
            "gaps_s": [list(g) for g in self.gaps],
            "event_resolution": list(self.event_resolution),
            "frame_resolution": list(self.frame_resolution),
            "duration_s": self.duration,
        }

    @classmethod
    def from_dict(cls, d):
        ext = d["extrinsics_event_to_frame"]
        return cls(
            event_intrinsics=Intrinsics(**d["event_intrinsics"]),
            frame_intrinsics=Intrinsics(**d["frame_intrinsics"]),
            R_ef=so3.from_quaternion(np.asarray(ext["rotation_wxyz"], dtype=float)),
            t_ef=np.asarray(ext["translation_m"], dtype=float),
            time_offset=float(d["time_offset_us"]) * 1e-6,
            spline=segment_from_dict(d["trajectory"]),
            pattern=PatternGeometry.from_dict(d["pattern"]),
            gaps=tuple(tuple(g) for g in d.get("gaps_s", ())),
            event_resolution=tuple(d["event_resolution"]),
            frame_resolution=tuple(d["frame_resolution"]),
            duration=float(d["duration_s"]),
        )


def _channel(rng, amp, freq_range):
    f = rng.uniform(*freq_range, size=2)
    w = np.array([0.65, 0.35])

    def fn(t):
        t = np.asarray(t, dtype=float)
        return amp * (w[0] * np.sin(2 * np.pi * f[0] * t) + w[1] * np.sin(2 * np.pi * f[1] * t))

    return fn


def look_at_poses(cfg, pattern, times):
    """World-to-camera poses of the analytic motion at ``times``."""
    rng = np.random.default_rng(cfg.seed)
    ch = {
        k: _channel(rng, a, cfg.freq_range)
        for k, a in (
            ("tx", cfg.amp_target),
            ("ty", cfg.amp_target),
            ("az", cfg.amp_azimuth),
            ("el", cfg.amp_elevation),
            ("roll", cfg.amp_roll),
            ("dist", cfg.amp_distance),
        )
    }
    times = np.asarray(times, dtype=float)
    center = np.array([(pattern.cols - 1) * pattern.spacing / 2, (pattern.rows - 1) * pattern.spacing / 2, 0.0])
    target = center + np.stack([ch["tx"](times), ch["ty"](times), np.zeros_like(times)], axis=-1)
    az, el = ch["az"](times), ch["el"](times)
    dist = cfg.distance + ch["dist"](times)
    # camera sits on the -Z side of the pattern and looks towards +Z
    back = np.stack([np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)], axis=-1)
    pos = target + dist[:, None] * back
    z = -back
    x0 = np.array([1.0, 0.0, 0.0])
    x = x0 - (z @ x0)[:, None] * z
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(z, x)
    psi = ch["roll"](times)[:, None]
    xr = np.cos(psi) * x + np.sin(psi) * y
    yr = -np.sin(psi) * x + np.cos(psi) * y
    R_cw = np.stack([xr, yr, z], axis=-1)
    R = np.swapaxes(R_cw, -1, -2)
    t = -np.einsum("nij,nj->ni", R, pos)
    return R, t


def frame_extrinsics(baseline, distance=0.5, seed=0):
    """Event-to-frame transform: frame camera offset along x, toed in."""
    c = np.array([baseline, 0.0, 0.0])
    n = np.hypot(baseline, distance)
    z = np.array([-baseline, 0.0, distance]) / n
    x = np.array([distance, 0.0, baseline]) / n
    y = np.cross(z, x)
    R_fe = np.stack([x, y, z], axis=1)
    # small generic misalignment
    R_fe = R_fe @ so3.so3_exp(np.random.default_rng(seed + 7).normal(0.0, 0.01, 3))
    R_ef = R_fe.T
    return R_ef, -R_ef @ c


def generate_trajectory(cfg, pattern=None):
    """Ground truth for a configuration (no events or frames yet)."""
    pattern = pattern or PatternGeometry()
    dt = cfg.knot_interval
    n = int(np.ceil(cfg.duration / dt)) + 4
    cp_times = (np.arange(n) - 1.0) * dt
    R, t = look_at_poses(cfg, pattern, cp_times)
    spline = SplineSegment(0.0, dt, R, t)
    R_ef, t_ef = frame_extrinsics(cfg.baseline_m, cfg.distance, cfg.seed)
    truth = GroundTruth(
        event_intrinsics=Intrinsics(*cfg.event_intrinsics),
        frame_intrinsics=Intrinsics(*cfg.frame_intrinsics),
        R_ef=R_ef,
        t_ef=t_ef,
        time_offset=cfg.time_offset_ms * 1e-3,
        spline=spline,
        pattern=pattern,
        gaps=cfg.gaps,
        event_resolution=tuple(cfg.event_resolution),
        frame_resolution=tuple(cfg.frame_resolution),
        duration=float(cfg.duration),
    )
    if fov_coverage(truth, step=0.05) == 0.0:
        raise GenerationFailed("the pattern is never fully visible")
    return truth


def _pattern_outline(pattern, n=24):
    r = pattern.circle_radius
    x0, x1 = -r, (pattern.cols - 1) * pattern.spacing + r
    y0, y1 = -r, (pattern.rows - 1) * pattern.spacing + r
    s = np.linspace(0.0, 1.0, n)
    pts = np.concatenate(
        [
            np.stack([x0 + (x1 - x0) * s, np.full(n, y0)], 1),
            np.stack([x0 + (x1 - x0) * s, np.full(n, y1)], 1),
            np.stack([np.full(n, x0), y0 + (y1 - y0) * s], 1),
            np.stack([np.full(n, x1), y0 + (y1 - y0) * s], 1),
        ]
    )
    return np.concatenate([pts, np.zeros((len(pts), 1))], axis=1)


def fov_coverage(truth, step=0.01):
    """Fraction of sample times at which the whole pattern is inside both images."""
    times = np.arange(0.0, truth.duration, step)
    times = times[times < truth.spline.t_end]
    outline = _pattern_outline(truth.pattern, 8)
    R, t = truth.pose(times)
    pe = np.einsum("nij,mj->nmi", R, outline) + t[:, None, :]
    Rf = truth.R_ef @ R
    tf = t @ truth.R_ef.T + truth.t_ef
    pf = np.einsum("nij,mj->nmi", Rf, outline) + tf[:, None, :]
    ok = np.ones(len(times), dtype=bool)
    for intr, res, p in (
        (truth.event_intrinsics, truth.event_resolution, pe),
        (truth.frame_intrinsics, truth.frame_resolution, pf),
    ):
        uv = project(intr, p, strict=False)
        inside = CameraGeometry(intr, res).in_image(uv)
        ok &= np.all(inside & np.isfinite(uv[..., 0]), axis=1)
    return float(np.mean(ok)) if len(ok) else 0.0


# ---------------------------------------------------------------------------
# events


FAR = 1e3  # signed distance (px) used for pixels that do not see the pattern


def signed_distance(pattern, X, Y):
    """Signed distance (m) to the nearest dark/bright boundary, positive on bright.

    The dark set is each disk minus the two bright crosspoint quadrants
    inside ``inner_radius``. Shapes are combined with min/max, which is
    exact away from corners and continuous everywhere.
    """
    s, r_out, r_in = pattern.spacing, pattern.circle_radius, pattern.inner_radius
    c = np.clip(np.rint(X / s), 0, pattern.cols - 1)
    r = np.clip(np.rint(Y / s), 0, pattern.rows - 1)
    dx, dy = X - c * s, Y - r * s
    rho = np.hypot(dx, dy)
    # bright quadrants: (+,-) and (-,+) for parity +1, mirrored for -1
    par = np.where((r + c) % 2 == 0, 1.0, -1.0)
    u, v = dx * par, dy
    quad_a = np.maximum(-u, v)  # u > 0, v < 0
    quad_b = np.maximum(u, -v)  # u < 0, v > 0
    bright_inner = np.maximum(rho - r_in, np.minimum(quad_a, quad_b))
    return np.maximum(rho - r_out, -bright_inner)


def is_dark(pattern, X, Y):
    return signed_distance(pattern, X, Y) < 0


def _plane_points(rays, R, t):
    """Pattern-plane intersection of camera rays for pose(s) ``R``, ``t``.

    ``R`` is either one rotation applied to all rays or a stack of rotations
    of shape (M, 3, 3), giving points of shape (M, ...). Also returns the
    depth along the optical axis (rays have unit z).
    """
    R = np.asarray(R)
    if R.ndim == 2:
        origin = -R.T @ t
        d = rays @ R
    else:
        origin = -np.einsum("mji,mj->mi", R, t)
        d = np.einsum("...j,mji->m...i", rays, R)
        origin = origin.reshape((len(R),) + (1,) * (rays.ndim - 1) + (3,))
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = -origin[..., 2] / d[..., 2]
    valid = np.isfinite(lam) & (lam > 0)
    lam = np.where(valid, lam, 1.0)
    return origin[..., 0] + lam * d[..., 0], origin[..., 1] + lam * d[..., 1], lam, valid


def _pixel_distance(pattern, focal, rays, R, t):
    """Signed distance in pixels seen along each ray."""
    X, Y, depth, valid = _plane_points(rays, R, t)
    return np.where(valid, signed_distance(pattern, X, Y) * focal / depth, FAR)


def _roi(truth, outline, R, t, margin=4):
    w, h = truth.event_resolution
    pc = outline @ R.T + t
    if np.any(pc[:, 2] <= 0):
        return 0, w, 0, h
    uv = project(truth.event_intrinsics, pc)
    x0 = int(np.clip(np.floor(uv[:, 0].min()) - margin, 0, w))
    x1 = int(np.clip(np.ceil(uv[:, 0].max()) + margin + 1, 0, w))
    y0 = int(np.clip(np.floor(uv[:, 1].min()) - margin, 0, h))
    y1 = int(np.clip(np.ceil(uv[:, 1].max()) + margin + 1, 0, h))
    return x0, x1, y0, y1


def pixel_rays(truth, quantization=True, seed=0):
    """Unit-depth rays through each pixel's sample point, shape (h, w, 3)."""
    w, h = truth.event_resolution
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    if quantization:
        rng = np.random.default_rng(seed + 101)
        xs = xs + rng.uniform(-0.5, 0.5, xs.shape)
        ys = ys + rng.uniform(-0.5, 0.5, ys.shape)
    xy = pixel_to_normalized(truth.event_intrinsics, np.stack([xs, ys], axis=-1))
    return np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)


def edge_levels(cfg, shape, seed=0):
    """Signed distances (px) at which each pixel emits an event.

    Across an edge the intensity follows a Gaussian-blurred step from
    ``dark_intensity`` to 1. A pixel fires whenever its log intensity passes
    one of the levels ``log(dark) + (k + phase) * C``, with a random phase
    per pixel. Returned shape is ``shape + (K,)``, NaN padded.
    """
    lo, hi = np.log(cfg.dark_intensity), 0.0
    k_max = int(np.ceil((hi - lo) / cfg.contrast_threshold)) + 1
    phase = np.random.default_rng(seed + 505).uniform(0.0, 1.0, shape)
    L = lo + (np.arange(k_max) + phase[..., None]) * cfg.contrast_threshold
    frac = (np.exp(L) - cfg.dark_intensity) / (1.0 - cfg.dark_intensity)
    with np.errstate(invalid="ignore"):
        d = cfg.blur_px * ndtri(np.where((frac > 0) & (frac < 1), frac, np.nan))
    return d


def simulate_events(truth, cfg, t_start=0.0, t_end=None):
    """Event stream of the pattern over ``[t_start, t_end)`` seconds."""
    pattern = truth.pattern
    t_end = min(truth.duration if t_end is None else t_end, truth.spline.t_end)
    w, h = truth.event_resolution
    focal = 0.5 * (truth.event_intrinsics.fx + truth.event_intrinsics.fy)
    rays = pixel_rays(truth, cfg.quantization, cfg.seed)
    levels = edge_levels(cfg, (h, w), cfg.seed)
    reach = np.nanmax(np.abs(levels)) + 1e-9
    outline = _pattern_outline(pattern)
    step = cfg.sim_step_us * 1e-6
    n_steps = int(np.floor((t_end - t_start) / step))
    chunks_t, chunks_x, chunks_y, chunks_p = [], [], [], []
    prev = np.full((h, w), FAR)
    cur = np.full((h, w), FAR)
    R0, t0 = truth.pose(t_start)
    prev_box = _roi(truth, outline, R0, t0)
    x0, x1, y0, y1 = prev_box
    prev[y0:y1, x0:x1] = _pixel_distance(pattern, focal, rays[y0:y1, x0:x1], R0, t0)
    cur_box = (0, 0, 0, 0)
    times = t_start + step * np.arange(1, n_steps + 1)
    Rs, ts = truth.pose(times)
    sub = np.linspace(0.0, 1.0, SUBSTEPS + 1)
    ta = t_start
    for k in range(n_steps):
        tb = times[k]
        box = _roi(truth, outline, Rs[k], ts[k])
        x0, x1, y0, y1 = box
        cx0, cx1, cy0, cy1 = cur_box
        cur[cy0:cy1, cx0:cx1] = FAR  # clear what this buffer held two steps ago
        cur[y0:y1, x0:x1] = _pixel_distance(pattern, focal, rays[y0:y1, x0:x1], Rs[k], ts[k])
        ux0, ux1 = min(prev_box[0], x0), max(prev_box[1], x1)
        uy0, uy1 = min(prev_box[2], y0), max(prev_box[3], y1)
        da = prev[uy0:uy1, ux0:ux1]
        db = cur[uy0:uy1, ux0:ux1]
        near = np.nonzero((np.minimum(np.abs(da), np.abs(db)) < reach) | ((da < 0) != (db < 0)))
        if near[0].size:
            py = near[0] + uy0
            px = near[1] + ux0
            lev = levels[py, px]
            a, b = prev[py, px][:, None], cur[py, px][:, None]
            crossed = (np.minimum(a, b) < lev) & (lev <= np.maximum(a, b))
            if np.any(crossed):
                pi, li = np.nonzero(crossed)
                tc, pol = _crossing_times(
                    pattern, focal, truth, rays[py[pi], px[pi]], lev[pi, li], ta + (tb - ta) * sub
                )
                chunks_t.append(tc)
                chunks_x.append(px[pi])
                chunks_y.append(py[pi])
                chunks_p.append(pol)
        prev, cur = cur, prev
        cur_box, prev_box = prev_box, box
        ta = tb
    return _finish_stream(truth, cfg, chunks_t, chunks_x, chunks_y, chunks_p, t_start, t_end)


def _crossing_times(pattern, focal, truth, rays, level, sub_times):
    """Time at which each ray's signed distance first passes ``level``.

    The distance is evaluated with exact poses on a sub-step grid; inside
    the bracketing sub-step it is interpolated linearly and its root taken.
    Returns times and polarities (+1 when moving towards bright).
    """
    Rm, tm = truth.pose(sub_times)
    d = _pixel_distance(pattern, focal, rays, Rm, tm) - level[None, :]  # (M, P)
    above = d > 0
    flip = above != above[0][None, :]
    m = np.where(flip.any(axis=0), np.argmax(flip, axis=0), len(sub_times) - 1)
    m = np.maximum(m, 1)
    cols = np.arange(d.shape[1])
    fa, fb = d[m - 1, cols], d[m, cols]
    den = fa - fb
    frac = np.clip(np.where(den != 0, fa / np.where(den != 0, den, 1.0), 0.5), 0.0, 1.0)
    h = sub_times[1] - sub_times[0]
    pol = np.where(fb > fa, 1, -1)
    return sub_times[m - 1] + frac * h, pol


def _clutter(cfg, truth, t_start, t_end, rng):
    w, h = truth.event_resolution
    n = rng.poisson(cfg.clutter_rate * (t_end - t_start))
    ts, xs, ys, ps = [], [], [], []
    for _ in range(n):
        p0 = rng.uniform([0, 0], [w - 1, h - 1])
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(20, 60)
        s = np.linspace(0.0, length, int(length) * 2)
        pts = np.rint(p0 + s[:, None] * np.array([np.cos(ang), np.sin(ang)]))
        pts = np.unique(pts.astype(np.int64), axis=0)
        pts = pts[(pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)]
        tc = rng.uniform(t_start, t_end)
        ts.append(tc + rng.uniform(0, 1e-3, len(pts)))
        xs.append(pts[:, 0])
        ys.append(pts[:, 1])
        ps.append(np.full(len(pts), rng.choice([-1, 1])))
    return ts, xs, ys, ps


def _finish_stream(truth, cfg, ts, xs, ys, ps, t_start, t_end):
    rng = np.random.default_rng(cfg.seed + 202)
    if cfg.clutter_rate > 0:
        ct, cx, cy, cp = _clutter(cfg, truth, t_start, t_end, rng)
        ts, xs, ys, ps = ts + ct, xs + cx, ys + cy, ps + cp
    if not ts:
        return EventStream.empty(truth.event_resolution)
    t = np.concatenate(ts)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    p = np.concatenate(ps)
    t_us = t * 1e6
    if cfg.jitter_us > 0:
        t_us = t_us + rng.normal(0.0, cfg.jitter_us, t_us.size)
    t_us = np.rint(t_us).astype(np.int64)
    keep = (t_us >= int(np.ceil(t_start * 1e6))) & (t_us < int(np.floor(t_end * 1e6)))
    keep &= ~truth.in_gap(t_us * 1e-6)
    t_us, x, y, p = t_us[keep], x[keep], y[keep], p[keep]
    order = np.lexsort((x, y, t_us))
    return EventStream(t_us[order], x[order], y[order], p[order], truth.event_resolution)


# ---------------------------------------------------------------------------
# frames and oracle features


def simulate_frames(truth, cfg, t_start=0.0, t_end=None):
    """Crosspoint observations of the frame camera (frame-clock timestamps)."""
    t_end = truth.duration if t_end is None else t_end
    rng = np.random.default_rng(cfg.seed + 303)
    world = pattern_world_points(truth.pattern)
    geom = CameraGeometry(truth.frame_intrinsics, truth.frame_resolution)
    k = np.arange(int(np.ceil(t_start * cfg.frame_rate)), int(np.ceil(t_end * cfg.frame_rate)) + 1)
    t_us = np.rint(k * 1e6 / cfg.frame_rate).astype(np.int64)
    t_ev = t_us * 1e-6 + truth.time_offset
    keep = (t_ev >= max(t_start, truth.spline.t0)) & (t_ev < min(t_end, truth.spline.t_end))
    out = []
    for tf in t_us[keep]:
        R, t = truth.frame_pose(tf * 1e-6)
        pc = world @ R.T + t
        if np.any(pc[:, 2] <= 0):
            continue
        uv = project(truth.frame_intrinsics, pc)
        if cfg.frame_noise_px > 0:
            uv = uv + rng.normal(0.0, cfg.frame_noise_px, uv.shape)
        ok = geom.in_image(uv)
        if np.count_nonzero(ok) < 4:
            continue
        out.append(FrameObservation(tf, np.flatnonzero(ok), uv[ok]))
    return out


def oracle_features(truth, cfg, window_us=4000, t_start=0.0, t_end=None, min_features=None):
    """Moving-ellipse features computed directly from the ground truth.

    The center at the window start is the projection of the circle center
    and the velocity is the chord over the window, so sampling the feature
    at the window start and end reproduces the true projections exactly.
    ``cfg.event_noise_px`` adds independent Gaussian noise to both ends.
    Windows touching a gap, or with fewer than ``min_features`` features
    fully inside the image, are skipped.
    """
    pattern = truth.pattern
    min_features = pattern.size - 2 if min_features is None else min_features
    t_end = min(truth.duration if t_end is None else t_end, truth.spline.t_end)
    rng = np.random.default_rng(cfg.seed + 404)
    world = pattern_world_points(pattern)
    geom = CameraGeometry(truth.event_intrinsics, truth.event_resolution)
    fx = truth.event_intrinsics.fx
    start_us = int(np.ceil(t_start * 1e6))
    w0 = np.arange(start_us, int(np.floor(t_end * 1e6)) - window_us + 1, window_us)
    span = window_us * 1e-6
    a = w0 * 1e-6
    b = a + span
    keep = ~(truth.in_gap(a) | truth.in_gap(b - 1e-9))
    for g0, g1 in truth.gaps:
        keep &= ~((a < g0) & (b > g0))
    w0, a, b = w0[keep], a[keep], b[keep]
    Ra, ta = truth.pose(a)
    Rb, tb = truth.pose(b)
    pa = np.einsum("nij,mj->nmi", Ra, world) + ta[:, None, :]
    pb = np.einsum("nij,mj->nmi", Rb, world) + tb[:, None, :]
    ua = project(truth.event_intrinsics, pa, strict=False)
    ub = project(truth.event_intrinsics, pb, strict=False)
    radius = fx * pattern.circle_radius / np.where(pa[..., 2] > 0, pa[..., 2], np.inf)
    vis = (
        np.isfinite(ua[..., 0])
        & np.isfinite(ub[..., 0])
        & geom.in_image(ua, margin=0.0)
        & geom.in_image(ub, margin=0.0)
    )
    vis &= geom.in_image(ua - radius[..., None]) & geom.in_image(ua + radius[..., None])
    if cfg.event_noise_px > 0:
        ua = ua + rng.normal(0.0, cfg.event_noise_px, ua.shape)
        ub = ub + rng.normal(0.0, cfg.event_noise_px, ub.shape)
    out = []
    for n in range(len(w0)):
        ids = np.flatnonzero(vis[n])
        if len(ids) < min_features:
            continue
        for j in ids:
            c0 = ua[n, j]
            rad = radius[n, j]
            coeffs = np.array([0.5, 0.0, 0.5, -c0[0], -c0[1], 0.5 * (c0 @ c0 - rad * rad)])
            out.append(
                MovingEllipseFeature(int(w0[n]), int(j), coeffs, (ub[n, j] - c0) / span, span / 2, 0.0)
            )
    return out


@dataclass
class Dataset:
    truth: GroundTruth
    config: SimConfig
    events: EventStream = None
    frames: list = field(default_factory=list)

    def summary(self):
        return {
            "events": 0 if self.events is None else len(self.events),
            "frames": len(self.frames),
            "frame_points": int(sum(len(f.ids) for f in self.frames)),
            "duration_s": self.truth.duration,
            "time_offset_ms": self.truth.time_offset * 1e3,
        }


def make_dataset(cfg, pattern=None, events=True):
    truth = generate_trajectory(cfg, pattern)
    ev = simulate_events(truth, cfg) if events else None
    return Dataset(truth, cfg, ev, simulate_frames(truth, cfg))


def config_to_dict(cfg):
    d = asdict(cfg)
    d["gaps"] = [list(g) for g in cfg.gaps]
    for k in ("freq_range", "event_intrinsics", "frame_intrinsics", "event_resolution", "frame_resolution"):
        d[k] = list(d[k])
    return d
