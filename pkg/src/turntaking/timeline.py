"""Framed dual-channel voice activity and speech segments.

Durations are converted to frames with one rule everywhere: ``ms * fps / 1000``
rounded half-up.  At 12.5 fps that gives 240 ms -> 3 frames and
1000 ms -> 13 frames.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

CHANNELS = ("A", "B")


def other(channel: str) -> str:
    if channel not in CHANNELS:
        raise ValueError(f"unknown channel {channel!r}")
    return "B" if channel == "A" else "A"


@dataclass(frozen=True)
class FrameRate:
    frames_per_second: float = 12.5

    def __post_init__(self):
        if not self.frames_per_second > 0:
            raise ValueError("frames_per_second must be positive")

    @property
    def frame_ms(self) -> float:
        return 1000.0 / self.frames_per_second


DEFAULT_RATE = FrameRate()


def duration_to_frames(ms: float, rate: FrameRate | float = DEFAULT_RATE) -> int:
    """Convert milliseconds to a whole frame count, rounding half-up."""
    if ms < 0:
        raise ValueError("duration must be non-negative")
    fps = rate.frames_per_second if isinstance(rate, FrameRate) else rate
    exact = Fraction(ms) * Fraction(fps) / 1000
    return math.floor(exact + Fraction(1, 2))


@dataclass(frozen=True)
class SpeechSegment:
    channel: str
    onset_frame: int
    offset_frame: int  # exclusive

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")
        if not self.onset_frame < self.offset_frame:
            raise ValueError("segment onset must precede offset")

    @property
    def duration(self) -> int:
        return self.offset_frame - self.onset_frame

    @property
    def last_frame(self) -> int:
        return self.offset_frame - 1

    @property
    def span(self) -> tuple[int, int]:
        return (self.onset_frame, self.offset_frame)


def _as_activity(values) -> np.ndarray:
    if isinstance(values, str):
        values = [int(c) for c in values]
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError("activity must be one-dimensional")
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError("activity values must be exactly 0 or 1")
    out = arr.astype(np.uint8)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ActivityTimeline:
    a: np.ndarray
    b: np.ndarray
    rate: FrameRate = DEFAULT_RATE
    session_id: str = "session"

    def __post_init__(self):
        a = _as_activity(self.a)
        b = _as_activity(self.b)
        if a.shape != b.shape:
            raise ValueError("channels must have identical length")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def __len__(self) -> int:
        return int(self.a.shape[0])

    def __eq__(self, other_tl) -> bool:
        if not isinstance(other_tl, ActivityTimeline):
            return NotImplemented
        return (self.session_id == other_tl.session_id
                and self.rate == other_tl.rate
                and np.array_equal(self.a, other_tl.a)
                and np.array_equal(self.b, other_tl.b))

    def channel(self, ch: str) -> np.ndarray:
        if ch == "A":
            return self.a
        if ch == "B":
            return self.b
        raise ValueError(f"unknown channel {ch!r}")

    def stacked(self) -> np.ndarray:
        """(T, 2) array, column 0 = A."""
        return np.stack([self.a, self.b], axis=1)

    def swapped(self) -> "ActivityTimeline":
        return ActivityTimeline(self.b, self.a, self.rate, self.session_id)

    def segments(self, ch: str) -> list[SpeechSegment]:
        return extract_segments(self, ch)

    def frames(self, ms: float) -> int:
        return duration_to_frames(ms, self.rate)


def _runs(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    padded = np.concatenate([[0], x.astype(np.int8), [0]])
    d = np.diff(padded)
    return np.flatnonzero(d == 1), np.flatnonzero(d == -1)


def extract_segments(timeline: ActivityTimeline, channel: str) -> list[SpeechSegment]:
    """Run-length encode one channel into sorted, disjoint segments."""
    on, off = _runs(timeline.channel(channel))
    return [SpeechSegment(channel, int(s), int(e)) for s, e in zip(on, off)]


def rasterize_segments(segments: Iterable, length: int, rate: FrameRate = DEFAULT_RATE) -> np.ndarray:
    """Inverse of :func:`extract_segments` for a single channel.

    ``segments`` may hold :class:`SpeechSegment` objects or ``(onset, offset)`` pairs.
    """
    out = np.zeros(length, dtype=np.uint8)
    prev_end = 0
    for seg in segments:
        s, e = seg.span if isinstance(seg, SpeechSegment) else seg
        if not (0 <= s < e <= length):
            raise ValueError(f"segment {(s, e)} outside [0, {length})")
        if s < prev_end:
            raise ValueError(f"segment {(s, e)} overlaps or is out of order")
        out[s:e] = 1
        prev_end = e
    return out


# -- file formats -----------------------------------------------------------

def timeline_to_json(tl: ActivityTimeline) -> str:
    return json.dumps({
        "session_id": tl.session_id,
        "rate_fps": tl.rate.frames_per_second,
        "a": "".join(map(str, tl.a.tolist())),
        "b": "".join(map(str, tl.b.tolist())),
    })


def timeline_from_json(line: str) -> ActivityTimeline:
    obj = json.loads(line)
    return ActivityTimeline(obj["a"], obj["b"], FrameRate(float(obj["rate_fps"])), str(obj["session_id"]))


def write_timelines(path, timelines: Iterable[ActivityTimeline]) -> None:
    with open(path, "w") as fh:
        for tl in timelines:
            fh.write(timeline_to_json(tl) + "\n")


def read_timelines(path) -> list[ActivityTimeline]:
    with open(path) as fh:
        return [timeline_from_json(line) for line in fh if line.strip()]


SEGMENT_HEADER = ["session_id", "channel", "onset_frame", "offset_frame"]


def write_segments(path, timelines: Iterable[ActivityTimeline]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SEGMENT_HEADER)
        for tl in timelines:
            for ch in CHANNELS:
                for seg in extract_segments(tl, ch):
                    w.writerow([tl.session_id, ch, seg.onset_frame, seg.offset_frame])


def read_segments(path) -> dict[str, list[SpeechSegment]]:
    out: dict[str, list[SpeechSegment]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["session_id"], []).append(
                SpeechSegment(row["channel"], int(row["onset_frame"]), int(row["offset_frame"])))
    return out
