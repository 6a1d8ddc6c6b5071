"""Run configuration loaded from JSON.

A config file holds up to three sections, each optional::

    {
      "recognizer": {"window_us": 4000, "t_fit": 1.2},
      "calibration": {"knot_interval": 0.012},
      "synth": {"duration": 40.0, "seed": 0}
    }

Unknown sections or keys are rejected.
"""

from dataclasses import asdict, dataclass, field, fields, replace

from .calib import CalibConfig
from .errors import InvalidArgumentError
from .features.recognizer import RecognizerConfig
from .io import read_json
from .synth import SimConfig

SECTIONS = {"recognizer": RecognizerConfig, "calibration": CalibConfig, "synth": SimConfig}


@dataclass
class Config:
    recognizer: RecognizerConfig = field(default_factory=RecognizerConfig)
    calibration: CalibConfig = field(default_factory=CalibConfig)
    synth: SimConfig = field(default_factory=SimConfig)

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


def _build(cls, values, section):
    if not isinstance(values, dict):
        raise InvalidArgumentError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise InvalidArgumentError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise InvalidArgumentError(f"invalid value in {section!r}: {exc}") from exc


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise InvalidArgumentError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise InvalidArgumentError(f"unknown config section(s): {', '.join(unknown)}")
    return Config(**{name: _build(cls, doc.get(name, {}), name) for name, cls in SECTIONS.items()})


def load_config(path=None):
    """Defaults when ``path`` is None."""
    if path is None:
        return Config()
    return config_from_dict(read_json(path))


def with_seed(cfg, seed):
    return replace(cfg, synth=replace(cfg.synth, seed=int(seed)))
