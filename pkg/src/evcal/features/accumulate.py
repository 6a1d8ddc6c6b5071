"""Polarity-split accumulation frames."""

from dataclasses import dataclass

import numpy as np

from ..camera import EVENT_RESOLUTION
from ..events import EventStream


@dataclass
class AccumulationFrame:
    """Events of one window with per-pixel occupancy.

    ``pos_map`` / ``neg_map`` hold the latest timestamp at each pixel
    (``-1`` where empty). A pixel that saw both polarities keeps only the
    polarity of its latest event. ``events`` holds every event of the window.
    """

    t_start: int
    window: int
    pos_map: np.ndarray
    neg_map: np.ndarray
    events: EventStream

    @property
    def resolution(self):
        return self.pos_map.shape[1], self.pos_map.shape[0]

    def occupied(self):
        return int(np.count_nonzero(self.pos_map >= 0) + np.count_nonzero(self.neg_map >= 0))

    def pixel_polarity(self):
        """+1 / -1 / 0 map of the retained polarity."""
        return (self.pos_map >= 0).astype(np.int8) - (self.neg_map >= 0).astype(np.int8)


def accumulate(stream, t_start, window, resolution=None):
    """Build the accumulation frame for ``[t_start, t_start + window)``."""
    resolution = resolution or stream.resolution or EVENT_RESOLUTION
    w, h = resolution
    ev = stream.window(t_start, t_start + window)
    pos = np.full((h, w), -1, dtype=np.int64)
    neg = np.full((h, w), -1, dtype=np.int64)
    if len(ev):
        lin = ev.y.astype(np.int64) * w + ev.x
        # events are time-sorted: the last occurrence of each pixel is the latest
        rev_unique, rev_idx = np.unique(lin[::-1], return_index=True)
        last = len(lin) - 1 - rev_idx
        is_pos = ev.p[last] > 0
        pos.flat[rev_unique[is_pos]] = ev.t[last[is_pos]]
        neg.flat[rev_unique[~is_pos]] = ev.t[last[~is_pos]]
    return AccumulationFrame(int(t_start), int(window), pos, neg, ev)
