"""Command line: ``evcal synth | calibrate | evaluate``.

Exit codes: 0 success, 1 metrics outside tolerance, 2 bad input or usage,
3 calibration failed.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import io
from .calib import calibrate, evaluate, truth_reference
from .camera import EVENT_RESOLUTION
from .config import load_config
from .errors import CalibError, CalibrationImpossible, InitFailed, InvalidArgumentError, ParseError, SolverError
from .features.recognizer import recognize_stream
from .synth import BASELINES, config_to_dict, generate_trajectory, oracle_features, simulate_events, simulate_frames

EXIT_OK, EXIT_TOLERANCE, EXIT_INPUT, EXIT_FAILED = 0, 1, 2, 3


def _gap(text):
    try:
        a, b = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"gap must look like START:END in seconds, got {text!r}") from None
    return a, b


def _baseline(text):
    if text in BASELINES:
        return BASELINES[text]
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"baseline must be one of {sorted(BASELINES)} or metres") from None


def build_parser():
    p = argparse.ArgumentParser(prog="evcal", description="Event camera / frame camera calibration toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    s.add_argument("out_dir", type=Path)
    s.add_argument("--config", type=Path)
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float, help="seconds (default from config, 40)")
    s.add_argument("--time-offset-ms", type=float, help="injected t_d, t_event = t_frame + t_d")
    s.add_argument("--baseline", type=_baseline, help="narrow, regular, wide or a distance in metres")
    s.add_argument("--frame-noise-px", type=float)
    s.add_argument("--event-noise-px", type=float, help="noise on oracle feature centers")
    s.add_argument("--gap", type=_gap, action="append", help="event-side occlusion START:END (s), repeatable")
    s.add_argument("--no-events", action="store_true", help="skip the (slow) event simulation")
    s.add_argument("--oracle-features", action="store_true", help="also write features.csv from ground truth")
    s.add_argument("--binary", action="store_true", help="write events.bin instead of events.csv")

    c = sub.add_parser("calibrate", help="run recognition, stage 1 and stage 2")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--events", type=Path, help="event CSV or binary file")
    src.add_argument("--features", type=Path, help="feature CSV (skips recognition)")
    c.add_argument("--frames", type=Path, help="frame observation CSV (needed unless --stage1-only)")
    c.add_argument("--pattern", type=Path, required=True)
    c.add_argument("-o", "--out", type=Path, required=True, help="report JSON")
    c.add_argument("--config", type=Path)
    c.add_argument("--seed", type=int, help="accepted for symmetry; calibration is deterministic")
    c.add_argument("--resolution", type=int, nargs=2, default=EVENT_RESOLUTION, metavar=("W", "H"))
    c.add_argument("--dump-features", type=Path, help="write recognized features to this CSV")
    c.add_argument("--stage1-only", action="store_true")
    c.add_argument("--joint-refine", action="store_true", help="release stage-1 parameters in stage 2")
    c.add_argument("--freeze-time-offset", action="store_true", help="keep t_d at 0 (ablation)")
    c.add_argument("--single-spline", action="store_true", help="no piecewise segmentation (ablation)")
    c.add_argument("--plot-dir", type=Path)

    e = sub.add_parser("evaluate", help="compare a report with ground truth")
    e.add_argument("report", type=Path)
    e.add_argument("truth", type=Path)
    e.add_argument("-o", "--out", type=Path, help="metrics JSON")
    e.add_argument("--tol-et-mm", type=float, default=1.0)
    e.add_argument("--tol-er-deg", type=float, default=0.1)
    e.add_argument("--tol-td-ms", type=float, default=0.1)
    e.add_argument("--tol-rpe-px", type=float, default=None, help="bound on both mean RPEs (off by default)")
    e.add_argument("--plot-dir", type=Path)
    return p


def cmd_synth(args):
    cfg = load_config(args.config).synth
    overrides = {
        "seed": args.seed,
        "duration": args.duration,
        "time_offset_ms": args.time_offset_ms,
        "baseline_m": args.baseline,
        "frame_noise_px": args.frame_noise_px,
        "event_noise_px": args.event_noise_px,
        "gaps": tuple(args.gap) if args.gap else None,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    truth = generate_trajectory(cfg)
    frames = simulate_frames(truth, cfg)
    io.write_truth(out / "truth.json", truth)
    io.write_pattern(out / "pattern.json", truth.pattern)
    io.write_frames_csv(out / "frames.csv", frames)
    summary = {"frames": len(frames), "frame_points": int(sum(len(f.ids) for f in frames))}
    if not args.no_events:
        events = simulate_events(truth, cfg)
        name = "events.bin" if args.binary else "events.csv"
        io.write_events(out / name, events)
        summary["events"] = len(events)
    if args.oracle_features:
        feats = oracle_features(truth, cfg)
        io.write_features_csv(out / "features.csv", feats)
        summary["features"] = len(feats)
    io.write_json(out / "synth_config.json", {"synth": config_to_dict(cfg)})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_calibrate(args):
    cfg = load_config(args.config)
    pattern = io.read_pattern(args.pattern)
    if not args.stage1_only and args.frames is None:
        raise InvalidArgumentError("--frames is required unless --stage1-only is given")
    if args.features is not None:
        features = io.read_features_csv(args.features)
    else:
        stream = io.read_events(args.events, tuple(args.resolution))
        features, stats = recognize_stream(stream, pattern, cfg.recognizer, resolution=tuple(args.resolution))
        print(json.dumps({"recognition": stats.to_dict()}, sort_keys=True), file=sys.stderr)
        if not features:
            raise CalibrationImpossible("the pattern was not recognized in any accumulation window")
    if args.dump_features is not None:
        io.write_features_csv(args.dump_features, features)
    frames = io.read_frames_csv(args.frames) if args.frames is not None else []
    report = calibrate(
        features,
        frames,
        pattern,
        cfg.calibration,
        stage1_only=args.stage1_only,
        joint=args.joint_refine,
        freeze_td=args.freeze_time_offset,
        piecewise=not args.single_spline,
    )
    io.write_report(args.out, report)
    if args.plot_dir is not None:
        from .plotting import calibration_plots

        calibration_plots(args.plot_dir, report, features, frames)
    summary = {"event_intrinsics": report.event_intrinsics.to_dict(), "stage1_rpe_px": report.stage1_rpe.mean}
    if report.has_stage2:
        summary["time_offset_ms"] = report.time_offset * 1e3
        summary["stage2_rpe_px"] = report.stage2_rpe.mean
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args):
    report = io.read_report(args.report)
    truth = io.read_truth(args.truth)
    if not report.has_stage2:
        raise InvalidArgumentError("the report has no stage-2 results (calibrated with --stage1-only)")
    reference = truth_reference(truth, report.frame_times_us)
    m = evaluate(report, reference, truth)
    checks = {
        "e_t_mm": m.e_t_mm <= args.tol_et_mm,
        "e_r_deg": m.e_r_deg <= args.tol_er_deg,
        "delta_td_ms": abs(m.delta_td_ms) <= args.tol_td_ms,
    }
    if args.tol_rpe_px is not None:
        checks["rpe_px"] = max(m.rpe_event_px, m.rpe_frame_px) <= args.tol_rpe_px
    doc = {"metrics": m.to_dict(), "checks": checks, "passed": all(checks.values())}
    if args.out is not None:
        io.write_json(args.out, doc)
    if args.plot_dir is not None:
        from .plotting import evaluation_plots

        evaluation_plots(args.plot_dir, report, reference, m)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK if doc["passed"] else EXIT_TOLERANCE


COMMANDS = {"synth": cmd_synth, "calibrate": cmd_calibrate, "evaluate": cmd_evaluate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ParseError, InvalidArgumentError) as exc:
        print(f"evcal: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CalibrationImpossible, InitFailed, SolverError) as exc:
        print(f"evcal: calibration failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except CalibError as exc:
        print(f"evcal: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except OSError as exc:
        print(f"evcal: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
