"""Event stream container."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int  # microseconds
    p: int


class EventStream:
    """Column arrays of events sorted by timestamp (microseconds)."""

    def __init__(self, t, x, y, p, resolution=None, validate=True):
        self.t = np.ascontiguousarray(t, dtype=np.int64)
        self.x = np.ascontiguousarray(x, dtype=np.int32)
        self.y = np.ascontiguousarray(y, dtype=np.int32)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        self.resolution = None if resolution is None else tuple(int(v) for v in resolution)
        if validate:
            self._validate()

    def _validate(self):
        n = self.t.size
        if not (self.x.size == self.y.size == self.p.size == n):
            raise InvalidArgumentError("event columns have different lengths")
        if n and np.any(np.diff(self.t) < 0):
            raise InvalidArgumentError("event timestamps must be non-decreasing")
        if n and not np.all(np.abs(self.p) == 1):
            raise InvalidArgumentError("polarity must be -1 or +1")
        if self.resolution is not None and n:
            w, h = self.resolution
            if self.x.min() < 0 or self.y.min() < 0 or self.x.max() >= w or self.y.max() >= h:
                raise InvalidArgumentError("event coordinates outside the sensor")

    def __len__(self):
        return int(self.t.size)

    def __getitem__(self, k):
        if isinstance(k, (int, np.integer)):
            return Event(int(self.x[k]), int(self.y[k]), int(self.t[k]), int(self.p[k]))
        return EventStream(self.t[k], self.x[k], self.y[k], self.p[k], self.resolution, validate=False)

    def window(self, t_start, t_end):
        """Events with ``t_start <= t < t_end``."""
        a, b = np.searchsorted(self.t, [t_start, t_end], side="left")
        return self[a:b]

    def shifted(self, dt_us):
        return EventStream(self.t + int(dt_us), self.x, self.y, self.p, self.resolution, validate=False)

    @classmethod
    def from_events(cls, events, resolution=None):
        events = list(events)
        return cls(
            [e.t for e in events],
            [e.x for e in events],
            [e.y for e in events],
            [e.p for e in events],
            resolution,
        )

    @classmethod
    def empty(cls, resolution=None):
        return cls([], [], [], [], resolution)

    @classmethod
    def concatenate(cls, streams, resolution=None):
        t = np.concatenate([s.t for s in streams])
        order = np.argsort(t, kind="stable")
        return cls(
            t[order],
            np.concatenate([s.x for s in streams])[order],
            np.concatenate([s.y for s in streams])[order],
            np.concatenate([s.p for s in streams])[order],
            resolution,
        )
