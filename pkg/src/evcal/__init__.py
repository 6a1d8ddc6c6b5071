"""Spatiotemporal calibration of an event camera and a frame camera from a
circle-grid pattern."""

from .calib import (
    CalibConfig,
    CalibrationReport,
    FrameObservation,
    calibrate,
    evaluate,
    pnp_reference,
    truth_reference,
)
from .camera import Intrinsics, PatternGeometry
from .errors import CalibError
from .events import EventStream
from .features import MovingEllipseFeature, RecognizerConfig, recognize_stream
from .synth import SimConfig

__version__ = "0.1.0"

__all__ = [
    "CalibConfig",
    "CalibError",
    "CalibrationReport",
    "EventStream",
    "FrameObservation",
    "Intrinsics",
    "MovingEllipseFeature",
    "PatternGeometry",
    "RecognizerConfig",
    "SimConfig",
    "calibrate",
    "evaluate",
    "pnp_reference",
    "recognize_stream",
    "truth_reference",
]
