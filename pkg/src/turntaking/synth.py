"""Synthetic two-party conversations with a planted ground-truth event log.

Generation is a semi-Markov process over turns.  A turn is a run of
inter-pausal units (IPUs) by one speaker; between IPUs the speaker either
pauses and resumes, or yields the floor after a gap.  Backchannels and
overlaps by the listener are injected inside IPUs as Poisson events.  Every
construct is placed so that the activity-derived labels and actions match
what the generator planted, which makes the planted log an independent oracle
for the derivation code.

Turn-final IPUs are drawn from a shorter duration distribution than
turn-medial ones.  That is the only cue to an upcoming turn shift that the
activity stream carries, standing in for the prosodic and lexical cues of
real speech.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .actions import ActionEvent, read_events, read_words, write_events, write_words
from .timeline import (CHANNELS, ActivityTimeline, FrameRate, SpeechSegment, duration_to_frames,
                       other, rasterize_segments, read_timelines, write_timelines)

PRNG_ID = "numpy.random.PCG64"
MIN_IPU_FRAMES = 14          # longest BC / short overlap is 12, so IPUs never look like BCs
BC_FRAMES = (3, 9)
SHORT_OVERLAP_FRAMES = (10, 12)
PAUSE_FRAMES = (2, 24)       # resumed pauses stay under the 2 s CL window
SHORT_GAP_FRAMES = (1, 13)
LONG_GAP_FRAMES = (14, 49)   # still under the 4 s ST window
ISOLATION_FRAMES = 13
BARGE_OVERLAP_FRAMES = (2, 6)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    session_len_frames: int = 1500
    rate_fps: float = 12.5
    mean_utterance_ms: float = 3600
    mean_final_utterance_ms: float = 1200
    mean_gap_ms: float = 400
    mean_pause_ms: float = 700
    pause_resume_prob: float = 0.45
    long_pause_prob: float = 0.12
    backchannel_rate_per_min: float = 5.6
    overlap_rate_per_min: float = 2.0
    short_overlap_prob: float = 0.3
    word_rate_per_s: float = 3.0

    def __post_init__(self):
        for name in ("pause_resume_prob", "long_pause_prob", "short_overlap_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("backchannel_rate_per_min", "overlap_rate_per_min", "mean_gap_ms", "mean_pause_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.session_len_frames <= 0:
            raise ValueError("session_len_frames must be > 0")
        if self.word_rate_per_s <= 0 or self.rate_fps <= 0:
            raise ValueError("word_rate_per_s and rate_fps must be > 0")
        for name in ("mean_utterance_ms", "mean_final_utterance_ms"):
            if duration_to_frames(getattr(self, name), self.rate_fps) < MIN_IPU_FRAMES:
                raise ValueError(f"{name} is shorter than the minimum IPU of {MIN_IPU_FRAMES} frames")

    @property
    def rate(self) -> FrameRate:
        return FrameRate(self.rate_fps)

    def with_seed(self, seed: int) -> "GeneratorConfig":
        return GeneratorConfig(**{**asdict(self), "seed": int(seed)})


@dataclass
class PlantedLog:
    events: list[ActionEvent] = field(default_factory=list)
    segments: list[tuple[SpeechSegment, str]] = field(default_factory=list)
    transfer_gaps: list[int] = field(default_factory=list)


@dataclass
class Session:
    timeline: ActivityTimeline
    log: PlantedLog
    words: list[tuple[str, int]]
    seed: int


def _geometric_at_least(rng, lo: int, mean: float) -> int:
    extra = max(mean - lo, 0.0)
    return lo + (int(rng.geometric(1.0 / (extra + 1.0))) - 1)


def _bounded(rng, lo: int, hi: int, mean: float) -> int:
    """Geometric-shaped integer in [lo, hi] by rejection."""
    for _ in range(1000):
        x = _geometric_at_least(rng, lo, mean)
        if x <= hi:
            return x
    return hi


class _Builder:
    def __init__(self, cfg: GeneratorConfig, rng):
        self.cfg = cfg
        self.rng = rng
        fps = cfg.rate_fps
        self.limit = cfg.session_len_frames - 2
        self.medial_mean = cfg.mean_utterance_ms * fps / 1000
        self.final_mean = cfg.mean_final_utterance_ms * fps / 1000
        self.gap_mean = max(cfg.mean_gap_ms * fps / 1000, 1.0)
        self.pause_mean = max(cfg.mean_pause_ms * fps / 1000, PAUSE_FRAMES[0])
        self.bc_per_frame = cfg.backchannel_rate_per_min / (60 * fps)
        self.ov_per_frame = cfg.overlap_rate_per_min / (60 * fps)
        self.segs: dict[str, list[list]] = {"A": [], "B": []}
        self.events: list[ActionEvent] = []
        self.gaps: list[int] = []

    def last_offset(self, ch: str):
        return self.segs[ch][-1][1] if self.segs[ch] else None

    def next_ipu(self) -> tuple[bool, int]:
        final = self.rng.random() >= self.cfg.pause_resume_prob
        mean = self.final_mean if final else self.medial_mean
        return final, _geometric_at_least(self.rng, MIN_IPU_FRAMES, mean)

    def add(self, ch, on, off, tag):
        self.segs[ch].append([on, off, tag])

    def earliest_listener_onset(self, listener: str, floor: int) -> int:
        last = self.last_offset(listener)
        return floor if last is None else max(floor, last + ISOLATION_FRAMES)

    def place_short(self, listener: str, on: int, off: int, lo_hi, tag: str) -> None:
        """Put an isolated short listener vocalization inside the speaker IPU [on, off)."""
        d = int(self.rng.integers(lo_hi[0], lo_hi[1] + 1))
        first = self.earliest_listener_onset(listener, on + 2)
        last = off - (ISOLATION_FRAMES - 1) - d
        if last < first:
            return
        b = int(self.rng.integers(first, last + 1))
        self.add(listener, b, b + d, tag)
        self.events.append(ActionEvent(b, "BC", listener))
        self.events.append(ActionEvent(b, "CT", other(listener)))

    def plan_barge_in(self, listener: str, on: int, off: int):
        k = int(self.rng.integers(BARGE_OVERLAP_FRAMES[0], BARGE_OVERLAP_FRAMES[1] + 1))
        first = self.earliest_listener_onset(listener, on + MIN_IPU_FRAMES - 2)
        last = off - k
        if last < first:
            return None
        f = int(self.rng.integers(first, last + 1))
        final, d = self.next_ipu()
        d = max(d, k + MIN_IPU_FRAMES)
        if f + d > self.limit:
            return None
        return f, k, final, d

    def follow(self, speaker: str, off: int, final: bool):
        """Plan what follows an IPU ending at ``off`` and plant that offset's event.

        Returns the next IPU as (speaker, onset, tag, final, duration), or None
        when it would not fit in the session.
        """
        rng = self.rng
        if not final:
            gap = _bounded(rng, PAUSE_FRAMES[0], PAUSE_FRAMES[1], self.pause_mean)
            nxt_speaker, kind, tag = speaker, "CL", "resumed-pause"
        else:
            if rng.random() < self.cfg.long_pause_prob:
                gap = int(rng.integers(LONG_GAP_FRAMES[0], LONG_GAP_FRAMES[1] + 1))
            else:
                gap = _bounded(rng, SHORT_GAP_FRAMES[0], SHORT_GAP_FRAMES[1], self.gap_mean)
            nxt_speaker, kind, tag = other(speaker), "ST", "turn"
        nxt_final, d = self.next_ipu()
        start = off + gap
        if start + d > self.limit:
            return None
        self.events.append(ActionEvent(off - 1, kind, other(speaker)))
        if kind == "ST":
            self.gaps.append(gap)
        return nxt_speaker, start, tag, nxt_final, d

    def run(self) -> None:
        rng, cfg = self.rng, self.cfg
        speaker = CHANNELS[int(rng.integers(0, 2))]
        final, d = self.next_ipu()
        t, tag = int(rng.integers(2, 10)), "turn"
        if t + d > self.limit:
            return
        while True:
            on, off = t, t + d
            listener = other(speaker)
            barge = None
            if rng.random() < 1 - math.exp(-self.ov_per_frame * d):
                if rng.random() < cfg.short_overlap_prob:
                    self.place_short(listener, on, off, SHORT_OVERLAP_FRAMES, "interruption")
                else:
                    barge = self.plan_barge_in(listener, on, off)
            elif rng.random() < 1 - math.exp(-self.bc_per_frame * d):
                self.place_short(listener, on, off, BC_FRAMES, "backchannel")

            if barge is None:
                self.add(speaker, on, off, tag)
                nxt = self.follow(speaker, off, final)
            else:
                f, k, l_final, l_dur = barge
                self.add(speaker, on, f + k, tag)
                self.add(listener, f, f + l_dur, "interruption")
                self.events.append(ActionEvent(f, "SL", speaker))
                self.events.append(ActionEvent(f + k - 1, "ST", listener))
                nxt = self.follow(listener, f + l_dur, l_final)
            if nxt is None:
                return
            speaker, t, tag, final, d = nxt


def _word_boundaries(rng, segments, fps, word_rate) -> list[tuple[str, int]]:
    step = max(1, int(round(fps / word_rate)))
    out = []
    for seg, tag in segments:
        if tag == "backchannel" or seg.duration < MIN_IPU_FRAMES:
            continue
        frames = set()
        pos = seg.onset_frame + step - 1
        while pos < seg.last_frame - 1:
            j = pos + int(rng.integers(-1, 2))
            frames.add(min(max(j, seg.onset_frame), seg.last_frame - 2))
            pos += step
        frames.add(seg.last_frame)
        out.extend((seg.channel, f) for f in sorted(frames))
    return sorted(out, key=lambda x: (x[1], x[0]))


def generate(cfg: GeneratorConfig = GeneratorConfig()) -> Session:
    """One session: (timeline, planted log, word boundaries). Deterministic in ``cfg.seed``."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    builder = _Builder(cfg, rng)
    builder.run()
    T = cfg.session_len_frames
    tagged = []
    acts = {}
    for ch in CHANNELS:
        segs = sorted(builder.segs[ch])
        acts[ch] = rasterize_segments([(on, off) for on, off, _ in segs], T)
        tagged += [(SpeechSegment(ch, on, off), tag) for on, off, tag in segs]
    tagged.sort(key=lambda x: (x[0].onset_frame, x[0].channel))
    timeline = ActivityTimeline(acts["A"], acts["B"], cfg.rate, f"seed{cfg.seed}")
    words = _word_boundaries(rng, tagged, cfg.rate_fps, cfg.word_rate_per_s)
    return Session(timeline, PlantedLog(sorted(builder.events), tagged, list(builder.gaps)), words, cfg.seed)


def generate_corpus(cfg: GeneratorConfig, n_sessions: int) -> list[Session]:
    """``n_sessions`` independent sessions seeded ``cfg.seed + i``."""
    return [generate(cfg.with_seed(cfg.seed + i)) for i in range(n_sessions)]


# -- corpus files -------------------------------------------------------------

def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_corpus(out_dir, sessions: list[Session], cfg: GeneratorConfig, extra_meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "generator": asdict(cfg),
        "seeds": [s.seed for s in sessions],
        "session_ids": [s.timeline.session_id for s in sessions],
        "prng": PRNG_ID,
        **(extra_meta or {}),
    }
    write_timelines(out / "timelines.jsonl", [s.timeline for s in sessions])
    write_events(out / "events.csv", {s.timeline.session_id: s.log.events for s in sessions})
    write_words(out / "words.csv", {s.timeline.session_id: s.words for s in sessions})
    _atomic_write_text(out / "meta.json", json.dumps(meta, indent=2, sort_keys=True))
    return out


def read_corpus(in_dir) -> tuple[dict, list[Session]]:
    d = Path(in_dir)
    meta = json.loads((d / "meta.json").read_text())
    timelines = read_timelines(d / "timelines.jsonl")
    events = read_events(d / "events.csv")
    words = read_words(d / "words.csv")
    seeds = dict(zip(meta.get("session_ids", []), meta.get("seeds", [])))
    sessions = [Session(tl, PlantedLog(events.get(tl.session_id, [])), words.get(tl.session_id, []),
                        seeds.get(tl.session_id, -1)) for tl in timelines]
    return meta, sessions
