"""Regenerate the golden files in this directory.

Run from the repository root: ``python3 tests/data/make_golden.py``. Only
needed when the simulator or the recognizer changes on purpose.
"""

from pathlib import Path


from evcal import io, synth
from evcal.features import recognize_stream

HERE = Path(__file__).parent


def main():
    cfg = synth.SimConfig(duration=1.0, seed=0)
    truth = synth.generate_trajectory(cfg)
    events = synth.simulate_events(truth, cfg, 0.2, 0.208)
    io.write_events_csv(HERE / "clip_events.csv", events)
    io.write_pattern(HERE / "pattern.json", truth.pattern)
    io.write_truth(HERE / "truth.json", truth)
    feats, _ = recognize_stream(events, truth.pattern, resolution=truth.event_resolution)
    io.write_features_csv(HERE / "clip_features.csv", feats)
    print(len(events), "events,", len(feats), "features")


if __name__ == "__main__":
    main()
