"""Event streams, the CSV wire format, and voxel-grid conversion."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BINS = 3


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


@dataclass
class EventStream:
    """Time-ordered events stored column-wise.

    ``t`` is in microseconds, ``x`` is the column, ``y`` the row and ``p``
    the polarity in {+1, -1}.
    """

    width: int
    height: int
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns differ in length")

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for t, x, y, p in zip(self.t, self.x, self.y, self.p):
            yield Event(int(t), int(x), int(y), int(p))

    @classmethod
    def from_events(cls, events, width: int, height: int) -> "EventStream":
        events = list(events)
        cols = np.array([(e.t, e.x, e.y, e.p) for e in events], dtype=np.int64).reshape(-1, 4)
        stream = cls(width, height, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3])
        stream.validate()
        return stream

    def validate(self) -> None:
        if len(self) == 0:
            return
        if (self.t < 0).any():
            raise ValueError("negative timestamp")
        if np.any(np.diff(self.t) < 0):
            raise ValueError("timestamps are not non-decreasing")
        if (self.x < 0).any() or (self.x >= self.width).any():
            raise ValueError(f"x out of bounds for width {self.width}")
        if (self.y < 0).any() or (self.y >= self.height).any():
            raise ValueError(f"y out of bounds for height {self.height}")
        if not np.isin(self.p, (-1, 1)).all():
            raise ValueError("polarity must be +1 or -1")

    def negated(self) -> "EventStream":
        return EventStream(self.width, self.height, self.t, self.x, self.y, -self.p)

    def shifted(self, dt: int) -> "EventStream":
        return EventStream(self.width, self.height, self.t + dt, self.x, self.y, self.p)


class EventFormatError(ValueError):
    pass


def parse_events(path: str | os.PathLike, width: int, height: int) -> EventStream:
    """Read ``t_us,x,y,p`` lines; a leading ``#`` line is a header and skipped.

    Errors name the 1-based line number of the offending record.
    """
    ts, xs, ys, ps = [], [], [], []
    last_t = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if lineno == 1:
                    continue
                raise EventFormatError(f"line {lineno}: header only allowed on line 1")
            parts = line.split(",")
            if len(parts) != 4:
                raise EventFormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                raise EventFormatError(f"line {lineno}: non-integer field in {line!r}") from None
            if t < 0:
                raise EventFormatError(f"line {lineno}: negative timestamp {t}")
            if not (0 <= x < width and 0 <= y < height):
                raise EventFormatError(
                    f"line {lineno}: coordinate ({x},{y}) outside {width}x{height} sensor"
                )
            if p not in (1, -1):
                raise EventFormatError(f"line {lineno}: polarity {p} not in {{1,-1}}")
            if last_t is not None and t < last_t:
                raise EventFormatError(f"line {lineno}: timestamp {t} precedes {last_t}")
            last_t = t
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(p)
    return EventStream(width, height, ts, xs, ys, ps)


def write_events(stream: EventStream, path: str | os.PathLike, header: bool = True) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        if header:
            fh.write("# t_us,x,y,p\n")
        for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
            fh.write(f"{t},{x},{y},{p}\n")


def normalized_times(t: np.ndarray, bins: int) -> np.ndarray:
    """Map timestamps to ``[0, bins-1]``; a zero-length window maps everything to 0."""
    t = np.asarray(t, dtype=np.int64)
    if len(t) == 0:
        return np.zeros(0, np.float64)
    dt = t[-1] - t[0]
    if dt == 0:
        return np.zeros(len(t), np.float64)
    return (bins - 1) * (t - t[0]).astype(np.float64) / float(dt)


def voxelize(stream: EventStream, bins: int = DEFAULT_BINS, dtype=np.float64) -> np.ndarray:
    """Temporal-bilinear voxel grid of shape ``(height, width, bins)``.

    Each event splits its polarity between the two bins bracketing its
    normalized time, weighted ``1 - |b - t*|``.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    h, w = stream.height, stream.width
    grid = np.zeros(h * w * bins, dtype=np.float64)
    if len(stream):
        ts = normalized_times(stream.t, bins)
        lo = np.floor(ts).astype(np.int64)
        frac = ts - lo
        pol = stream.p.astype(np.float64)
        base = (stream.y * w + stream.x) * bins

        grid += np.bincount(base + lo, weights=pol * (1.0 - frac), minlength=grid.size)
        right = lo + 1 < bins
        grid += np.bincount(
            base[right] + lo[right] + 1, weights=pol[right] * frac[right], minlength=grid.size
        )
    return grid.reshape(h, w, bins).astype(dtype, copy=False)
