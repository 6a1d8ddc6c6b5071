"""Figures and CSV tables for ``--plot-dir``."""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import so3  # noqa: E402
from .calib import event_residuals, frame_residuals, pose_errors  # noqa: E402


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _trajectory_samples(report, step=0.005):
    rows = []
    for k, seg in enumerate(report.splines):
        ts = np.arange(seg.t0, seg.t_end, step)
        R, t = report.event_pose(ts)
        rv = so3.so3_log(R, check=False)
        for j in range(len(ts)):
            rows.append((k, ts[j], *t[j], *rv[j]))
    return np.array(rows).reshape(-1, 8)


def _residual_figure(path, r, title):
    e = np.linalg.norm(r, axis=1)
    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    ax[0].hist(e, bins=60, color="tab:blue")
    ax[0].set_xlabel("reprojection error [px]")
    ax[0].set_ylabel("count")
    ax[0].set_title(f"{title}: mean {e.mean():.3f} px")
    lim = max(1e-6, np.percentile(np.abs(r), 99)) * 1.2
    ax[1].scatter(r[:, 0], r[:, 1], s=1, alpha=0.3)
    ax[1].set_xlim(-lim, lim)
    ax[1].set_ylim(-lim, lim)
    ax[1].set_aspect("equal")
    ax[1].set_xlabel("du [px]")
    ax[1].set_ylabel("dv [px]")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def calibration_plots(out_dir, report, features=None, observations=None):
    """Trajectory, segment and residual figures plus matching CSV tables.

    Returns the list of written files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    seg_rows = [
        (k, s["start_s"], s["end_s"], s["knots"], s["feature_groups"], s["features"])
        for k, s in enumerate(report.segments)
    ]
    _write_csv(out / "segments.csv", ["segment", "start_s", "end_s", "knots", "feature_groups", "features"], seg_rows)
    written.append(out / "segments.csv")

    traj = _trajectory_samples(report)
    _write_csv(
        out / "trajectory.csv",
        ["segment", "t_rel_s", "tx_m", "ty_m", "tz_m", "rx_rad", "ry_rad", "rz_rad"],
        traj.tolist(),
    )
    written.append(out / "trajectory.csv")
    fig, ax = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    for k in range(len(report.splines)):
        m = traj[:, 0] == k
        for c, name in zip(range(2, 5), "xyz"):
            ax[0].plot(traj[m, 1], traj[m, c], color=f"C{c - 2}", lw=0.8, label=f"t{name}" if k == 0 else None)
            ax[1].plot(traj[m, 1], traj[m, c + 3], color=f"C{c - 2}", lw=0.8, label=f"r{name}" if k == 0 else None)
    for s in report.segments:
        for a in ax:
            a.axvspan(s["start_s"], s["end_s"], color="0.92", zorder=0)
    ax[0].set_ylabel("translation [m]")
    ax[1].set_ylabel("rotation vector [rad]")
    ax[1].set_xlabel("time since origin [s]")
    ax[0].legend(loc="upper right", fontsize=8)
    ax[1].legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "trajectory.png", dpi=110)
    plt.close(fig)
    written.append(out / "trajectory.png")

    if features:
        samples = report.options.get("samples", (0, 2))
        t, ids, r = event_residuals(report, features, samples)
        _write_csv(out / "residuals_event.csv", ["t_rel_s", "grid_id", "du_px", "dv_px"], zip(t, ids, r[:, 0], r[:, 1]))
        written.append(out / "residuals_event.csv")
        if len(r):
            _residual_figure(out / "residuals_event.png", r, "event camera")
            written.append(out / "residuals_event.png")
    if observations and report.has_stage2:
        t, ids, r = frame_residuals(report, observations)
        _write_csv(out / "residuals_frame.csv", ["frame_ts_us", "grid_id", "du_px", "dv_px"], zip(t, ids, r[:, 0], r[:, 1]))
        written.append(out / "residuals_frame.csv")
        if len(r):
            _residual_figure(out / "residuals_frame.png", r, "frame camera")
            written.append(out / "residuals_frame.png")
    return written


def evaluation_plots(out_dir, report, reference, metrics):
    """Per-frame pose errors over time and a metrics table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tau = (np.asarray(reference.t_us, dtype=np.int64) - report.origin_us) * 1e-6 + report.time_offset
    _, t_est = report.event_pose(tau)
    ok = np.isfinite(t_est[:, 0])
    e_t, e_r, e_g = pose_errors(report, reference)
    t_us = np.asarray(reference.t_us)[ok]
    _write_csv(
        out / "pose_errors.csv",
        ["frame_ts_us", "e_t_mm", "e_r_deg", "e_r_geodesic_deg"],
        zip(t_us, e_t * 1e3, np.degrees(e_r), np.degrees(e_g)),
    )
    flat = []
    for k, v in metrics.to_dict().items():
        if isinstance(v, dict):
            flat += [(f"{k}.{kk}", vv) for kk, vv in v.items()]
        else:
            flat.append((k, v))
    _write_csv(out / "metrics.csv", ["metric", "value"], flat)

    fig, ax = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    ts = t_us * 1e-6
    ax[0].plot(ts, e_t * 1e3, ".", ms=2)
    ax[0].set_ylabel("e_t [mm]")
    ax[0].set_title(f"mean e_t {metrics.e_t_mm:.3f} mm, e_r {metrics.e_r_deg:.3f} deg")
    ax[1].plot(ts, np.degrees(e_r), ".", ms=2, label="abs. angle difference")
    ax[1].plot(ts, np.degrees(e_g), ".", ms=2, label="geodesic")
    ax[1].set_ylabel("rotation error [deg]")
    ax[1].set_xlabel("frame time [s]")
    ax[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "pose_errors.png", dpi=110)
    plt.close(fig)
    return [out / "pose_errors.csv", out / "metrics.csv", out / "pose_errors.png"]
