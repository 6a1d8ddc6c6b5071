"""Event-based detection of the circle-grid features."""

from .accumulate import AccumulationFrame, accumulate
from .candidates import EllipseCandidate, extract_candidates
from .decode import DecodeResult, decode_pattern
from .recognizer import RecognitionStats, RecognizerConfig, recognize_frame, recognize_stream
from .refine import MovingEllipseFeature, refine_moving_ellipse
from .regions import ConnectedRegion, label_regions, suppress_noise

__all__ = [
    "AccumulationFrame",
    "ConnectedRegion",
    "DecodeResult",
    "EllipseCandidate",
    "MovingEllipseFeature",
    "RecognitionStats",
    "RecognizerConfig",
    "accumulate",
    "decode_pattern",
    "extract_candidates",
    "label_regions",
    "recognize_frame",
    "recognize_stream",
    "refine_moving_ellipse",
    "suppress_noise",
]
