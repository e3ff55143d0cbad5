"""Event records, per-pixel ordering checks and the event noise covariance.

Each event carries an additive Gaussian uncertainty whose variance is the sum
of three heuristics: Brownian process noise since the pixel's last event,
spatial isolation relative to the neighbourhood, and a refractory term for
events that arrive faster than the refractory bound.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

US = 1e-6


class StreamOrderError(ValueError):
    """Raised when events at one pixel are not strictly increasing in time."""


@dataclass(frozen=True)
class Event:
    t: float
    x: int
    y: int
    polarity: int

    def __post_init__(self):
        if self.polarity not in (-1, 1):
            raise ValueError(f"polarity must be -1 or +1, got {self.polarity}")
        if self.t < 0:
            raise ValueError(f"negative event time {self.t}")


@dataclass
class EventArray:
    """Columnar event storage, globally sorted by timestamp.

    Timestamps are integer microseconds; ``t`` gives seconds.
    """

    t_us: np.ndarray
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray

    def __post_init__(self):
        self.t_us = np.asarray(self.t_us, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.polarity = np.asarray(self.polarity, dtype=np.int8)
        n = len(self.t_us)
        if not (len(self.x) == len(self.y) == len(self.polarity) == n):
            raise ValueError("event columns have different lengths")

    def __len__(self):
        return len(self.t_us)

    @property
    def t(self) -> np.ndarray:
        return self.t_us * US

    @classmethod
    def empty(cls) -> "EventArray":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int32),
                   np.zeros(0, np.int32), np.zeros(0, np.int8))

    @classmethod
    def from_events(cls, events) -> "EventArray":
        events = list(events)
        return cls(np.array([round(e.t / US) for e in events], dtype=np.int64),
                   [e.x for e in events], [e.y for e in events],
                   [e.polarity for e in events])

    def __iter__(self):
        for i in range(len(self)):
            yield Event(float(self.t_us[i] * US), int(self.x[i]), int(self.y[i]),
                        int(self.polarity[i]))

    def select(self, mask) -> "EventArray":
        return EventArray(self.t_us[mask], self.x[mask], self.y[mask], self.polarity[mask])

    def pixel_index(self, width: int) -> np.ndarray:
        return self.y.astype(np.int64) * width + self.x

    def validate(self, width: int | None = None, height: int | None = None):
        """Check polarity values, bounds, global time order and per-pixel strict order."""
        if len(self) == 0:
            return
        if not np.all(np.abs(self.polarity) == 1):
            raise ValueError("polarity must be -1 or +1")
        if self.t_us.min() < 0:
            raise ValueError("negative timestamp")
        if np.any(np.diff(self.t_us) < 0):
            i = int(np.argmax(np.diff(self.t_us) < 0)) + 1
            raise StreamOrderError(f"stream not sorted by time at event {i}")
        if width is not None and height is not None:
            if (self.x.min() < 0 or self.y.min() < 0 or self.x.max() >= width
                    or self.y.max() >= height):
                raise ValueError(f"event coordinates outside {width}x{height} sensor")
        w = int(self.x.max()) + 1 if width is None else width
        h = int(self.y.max()) + 1 if height is None else height
        j = _first_duplicate(self.t_us, self.pixel_index(w), w * h)
        if j >= 0:
            raise StreamOrderError(
                f"duplicate timestamp {self.t_us[j]} us at pixel ({self.x[j]}, {self.y[j]})")


@numba.njit(cache=True)
def _first_duplicate(t_us, pix, n_pix):
    """Index of the first event repeating a (pixel, timestamp) pair in a time-sorted stream."""
    seen = np.full(n_pix, -1, dtype=np.int64)
    run = 0
    for i in range(len(t_us)):
        if i > 0 and t_us[i] != t_us[i - 1]:
            run = i
        if seen[pix[i]] == run:
            return i
        seen[pix[i]] = run
    return -1


@dataclass(frozen=True)
class EventNoiseParams:
    sigma2_proc: float = 0.01
    sigma2_iso: float = 0.01
    sigma2_ref: float = 0.01
    rho_bar: float = 0.01
    neighborhood_radius: int = 1
    q_cap: float = 1.0

    def __post_init__(self):
        for name in ("sigma2_proc", "sigma2_iso", "sigma2_ref", "rho_bar", "q_cap"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.neighborhood_radius < 1:
            raise ValueError("neighborhood_radius must be >= 1")


def q_process(t_i: float, t_prev: float, params: EventNoiseParams) -> float:
    if t_i < t_prev:
        raise StreamOrderError(f"event at {t_i} precedes previous event at {t_prev}")
    return params.sigma2_proc * (t_i - t_prev)


def q_iso(t_i: float, t_star_neighborhood: float | None, params: EventNoiseParams,
          t_stream_start: float = 0.0) -> float:
    """Isolated-pixel covariance.

    ``t_star_neighborhood`` is the latest neighbourhood timestamp at or before
    ``t_i``; ``None`` means the neighbourhood never fired, in which case the
    age is measured from the stream start and capped.
    """
    if t_star_neighborhood is None:
        return min(params.sigma2_iso * (t_i - t_stream_start), params.q_cap)
    if t_star_neighborhood > t_i:
        raise StreamOrderError("neighbourhood timestamp is later than the event")
    return params.sigma2_iso * (t_i - t_star_neighborhood)


def q_ref(t_i: float, t_prev: float, params: EventNoiseParams) -> float:
    if t_i < t_prev:
        raise StreamOrderError(f"event at {t_i} precedes previous event at {t_prev}")
    return 0.0 if (t_i - t_prev) > params.rho_bar else params.sigma2_ref


class PixelTimestampMap:
    """Per-pixel time of the most recent event, initialised to the stream start.

    Never-fired pixels hold the stream start, so the isolated-pixel age of a
    cold neighbourhood is measured from the start of the stream.
    """

    def __init__(self, width: int, height: int, t_start: float = 0.0, radius: int = 1):
        self.width = width
        self.height = height
        self.t_start = t_start
        self.radius = radius
        self.last_event_time = np.full((height, width), t_start, dtype=np.float64)
        self.fired = np.zeros((height, width), dtype=bool)

    def neighborhood_latest(self, x: int, y: int) -> float:
        r = self.radius
        y0, y1 = max(0, y - r), min(self.height, y + r + 1)
        x0, x1 = max(0, x - r), min(self.width, x + r + 1)
        block = self.last_event_time[y0:y1, x0:x1].copy()
        block[y - y0, x - x0] = -np.inf
        return float(block.max()) if block.size > 1 else self.t_start


def q_total(event: Event, state: PixelTimestampMap, params: EventNoiseParams) -> float:
    """Total event covariance, capped at ``q_cap``; updates ``state``.

    Events are consumed one at a time, so a neighbour event sharing this
    timestamp is only visible if it was passed in first. The batch routine
    :func:`event_covariances` treats equal timestamps as simultaneous.
    """
    t_prev = float(state.last_event_time[event.y, event.x])
    if state.fired[event.y, event.x] and event.t <= t_prev:
        raise StreamOrderError(f"event at {event.t} does not follow previous event at {t_prev}")
    qp = q_process(event.t, t_prev, params)
    t_star = state.neighborhood_latest(event.x, event.y)
    qi = q_iso(event.t, t_star, params, state.t_start)
    qr = q_ref(event.t, t_prev, params)
    state.last_event_time[event.y, event.x] = event.t
    state.fired[event.y, event.x] = True
    return min(qp + qi + qr, params.q_cap)


@numba.njit(cache=True, nogil=True)
def _covariance_kernel(t, x, y, width, height, t_start, s_proc, s_iso, s_ref,
                       rho_bar, radius, q_cap, out):
    last = np.full(width * height, t_start)
    fired = np.zeros(width * height, dtype=np.bool_)
    prev = np.empty(len(t))
    n = len(t)
    i = 0
    while i < n:
        j = i
        while j < n and t[j] == t[i]:
            j += 1
        # equal timestamps are simultaneous: publish them all before reading neighbours
        for k in range(i, j):
            p = y[k] * width + x[k]
            if last[p] > t[k] or (fired[p] and last[p] == t[k]):
                return k
            prev[k] = last[p]
            last[p] = t[k]
            fired[p] = True
        for k in range(i, j):
            tk = t[k]
            t_star = t_start
            for yy in range(max(0, y[k] - radius), min(height, y[k] + radius + 1)):
                for xx in range(max(0, x[k] - radius), min(width, x[k] + radius + 1)):
                    if xx == x[k] and yy == y[k]:
                        continue
                    v = last[yy * width + xx]
                    if v > t_star:
                        t_star = v
            qp = s_proc * (tk - prev[k])
            qi = s_iso * (tk - t_star)
            qr = 0.0 if (tk - prev[k]) > rho_bar else s_ref
            q = qp + qi + qr
            out[k] = q if q < q_cap else q_cap
        i = j
    return -1


def event_covariances(events: EventArray, width: int, height: int,
                      params: EventNoiseParams, t_start: float = 0.0) -> np.ndarray:
    """Covariance of every event in a time-sorted stream.

    Events sharing a timestamp are treated as simultaneous, so the result does
    not depend on their order in the file.
    """
    out = np.empty(len(events), dtype=np.float64)
    if len(events) == 0:
        return out
    if np.any(np.diff(events.t_us) < 0):
        raise StreamOrderError("event stream is not sorted by time")
    bad = _covariance_kernel(events.t, events.x, events.y, width, height, float(t_start),
                             params.sigma2_proc, params.sigma2_iso, params.sigma2_ref,
                             params.rho_bar, params.neighborhood_radius, params.q_cap, out)
    if bad >= 0:
        raise StreamOrderError(
            f"event {bad} at ({events.x[bad]}, {events.y[bad]}) t_us={events.t_us[bad]} "
            "does not follow the pixel's previous event")
    return out
