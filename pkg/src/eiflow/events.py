"""Event streams, temporal-bin voxelization, time reversal, and event file IO.

An event is (x, y, t, p): pixel column/row, integer microsecond timestamp,
and polarity +1 or -1. Streams are column-oriented (one array per field),
validated and frozen at construction, and always carry their time window and
sensor extent.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from . import _kernels as _k

_EVS_MAGIC = b"EVS1"
_EVS_HEADER = struct.Struct("<IIQQQ")
_EVS_RECORD = np.dtype(
    [("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("p", "i1"), ("pad", "V3")]
)


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int
    p: int


class EventStream:
    """Immutable, time-sorted events over a closed window on a fixed sensor."""

    __slots__ = ("xs", "ys", "ts", "ps", "t_start", "t_end", "width", "height")

    def __init__(self, xs, ys, ts, ps, t_start: int, t_end: int,
                 width: int, height: int):
        # Copy into fresh contiguous arrays: freezing must not alias caller
        # memory, and the accumulation kernels require contiguous input.
        xs = np.array(xs, dtype=np.int64)
        ys = np.array(ys, dtype=np.int64)
        ts = np.array(ts, dtype=np.int64)
        ps = np.array(ps, dtype=np.int8)
        n = len(xs)
        if not (len(ys) == len(ts) == len(ps) == n):
            raise ValueError("event field arrays must have equal length")
        if width <= 0 or height <= 0:
            raise ValueError("sensor extent must be positive")
        if t_end < t_start:
            raise ValueError("window end precedes start")
        if n:
            if np.any(np.diff(ts) < 0):
                raise ValueError("event timestamps must be non-decreasing")
            if ts[0] < t_start or ts[-1] > t_end:
                raise ValueError("event timestamp outside the stream window")
            if np.any((xs < 0) | (xs >= width) | (ys < 0) | (ys >= height)):
                raise ValueError("event coordinates outside the sensor")
            if np.any(np.abs(ps) != 1):
                raise ValueError("polarity must be +1 or -1")
        for arr in (xs, ys, ts, ps):
            arr.setflags(write=False)
        self.xs, self.ys, self.ts, self.ps = xs, ys, ts, ps
        self.t_start = int(t_start)
        self.t_end = int(t_end)
        self.width = int(width)
        self.height = int(height)

    @classmethod
    def from_events(cls, events: Iterable[Event], t_start: int, t_end: int,
                    width: int, height: int) -> "EventStream":
        ev = list(events)
        return cls(
            [e.x for e in ev], [e.y for e in ev], [e.t for e in ev],
            [e.p for e in ev], t_start, t_end, width, height,
        )

    def __len__(self) -> int:
        return len(self.xs)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.xs, self.ys, self.ts, self.ps):
            yield Event(int(x), int(y), int(t), int(p))

    def __repr__(self) -> str:
        return (f"EventStream(n={len(self)}, window=[{self.t_start}, {self.t_end}], "
                f"sensor={self.width}x{self.height})")

    def clip(self, t_end: int) -> "EventStream":
        """Restrict to the prefix window [t_start, t_end]."""
        if not self.t_start <= t_end <= self.t_end:
            raise ValueError("clip boundary outside the stream window")
        keep = int(np.searchsorted(self.ts, t_end, side="right"))
        return EventStream(self.xs[:keep], self.ys[:keep], self.ts[:keep],
                           self.ps[:keep], self.t_start, t_end,
                           self.width, self.height)


@dataclass(frozen=True)
class EventVolume:
    """(2·bins, H, W) float32 grid; channels [0, bins) positive polarity."""

    data: np.ndarray
    bins: int

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 2 * self.bins:
            raise ValueError("volume must have shape (2*bins, H, W)")


def voxelize(stream: EventStream, bins: int = 5) -> EventVolume:
    """Accumulate events into 2·bins temporal channels split by polarity.

    Each event lands at normalized time t_hat = (t - t_start)/(t_end - t_start)
    and contributes max(0, 1 - |b - t_hat*(bins-1)|) to bin b of its polarity
    block. A zero-duration window maps every event to t_hat = 0. Normalization
    runs in float64; the accumulated grid is float32.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    duration = stream.t_end - stream.t_start
    if len(stream) == 0:
        return EventVolume(
            np.zeros((2 * bins, stream.height, stream.width), dtype=np.float32), bins
        )
    if duration == 0:
        t_hat = np.zeros(len(stream), dtype=np.float64)
    else:
        t_hat = (stream.ts - stream.t_start).astype(np.float64) / float(duration)
    pos = t_hat * (bins - 1)
    vol = _k.voxel_accumulate(bins, stream.height, stream.width,
                              stream.xs, stream.ys, pos, stream.ps)
    return EventVolume(vol, bins)


def reverse(stream: EventStream) -> EventStream:
    """Time-reverse a stream: t' = t_start + t_end - t, polarity flipped."""
    ts = (stream.t_start + stream.t_end) - stream.ts
    order = slice(None, None, -1)  # reversing a sorted array re-sorts ascending
    return EventStream(stream.xs[order], stream.ys[order], ts[order],
                       -stream.ps[order], stream.t_start, stream.t_end,
                       stream.width, stream.height)


def event_mask(stream: EventStream) -> np.ndarray:
    """(H, W) uint8 mask: 1 where the pixel emitted at least one event."""
    mask = np.zeros((stream.height, stream.width), dtype=np.uint8)
    mask[stream.ys, stream.xs] = 1
    return mask


def write_events(path, stream: EventStream) -> None:
    """Write the EVS1 binary layout: 36-byte header then 16-byte records."""
    rec = np.zeros(len(stream), dtype=_EVS_RECORD)
    rec["x"] = stream.xs
    rec["y"] = stream.ys
    rec["t"] = stream.ts
    rec["p"] = stream.ps
    with open(path, "wb") as fh:
        fh.write(_EVS_MAGIC)
        fh.write(_EVS_HEADER.pack(stream.width, stream.height,
                                  stream.t_start, stream.t_end, len(stream)))
        fh.write(rec.tobytes())


def read_events(path) -> EventStream:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _EVS_MAGIC:
        raise ValueError(f"{path}: not an EVS1 event file")
    header_end = 4 + _EVS_HEADER.size
    if len(raw) < header_end:
        raise ValueError(f"{path}: truncated EVS1 header")
    width, height, t_start, t_end, count = _EVS_HEADER.unpack(raw[4:header_end])
    body = raw[header_end:]
    if len(body) != count * _EVS_RECORD.itemsize:
        raise ValueError(f"{path}: truncated EVS1 payload "
                         f"({len(body)} bytes for {count} records)")
    rec = np.frombuffer(body, dtype=_EVS_RECORD)
    return EventStream(rec["x"].astype(np.int64), rec["y"].astype(np.int64),
                       rec["t"].astype(np.int64), rec["p"].astype(np.int8),
                       t_start, t_end, width, height)
