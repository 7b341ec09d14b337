"""Ground-truth agent actions and word-level C/B/T classes.

Anchor conventions:

* ST / CL are anchored on the user's last active frame before an offset.
* SL / CT are anchored on the onset frame of user speech that overlaps the agent.
* BC is anchored on the onset frame of the agent's short vocalization.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

from .labels import LabelConfig, bc_segment_mask, classify_offsets, floor_event_after, floor_taking_segments
from .timeline import CHANNELS, ActivityTimeline, extract_segments, other

ACTIONS = ("ST", "CL", "SL", "CT", "BC")
WORD_CLASSES = ("C", "B", "T")

# Which kind of anchor each action lives on.
ANCHOR_OF = {"ST": "offset", "CL": "offset", "SL": "overlap", "CT": "overlap", "BC": "agent_onset"}
ANCHOR_TYPES = ("offset", "overlap", "agent_onset")


@dataclass(frozen=True, order=True)
class ActionEvent:
    frame: int
    kind: str
    agent_channel: str

    def __post_init__(self):
        if self.kind not in ACTIONS:
            raise ValueError(f"unknown action {self.kind!r}")
        if self.agent_channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.agent_channel!r}")

    @property
    def anchor(self) -> str:
        return ANCHOR_OF[self.kind]


@dataclass(frozen=True)
class ActionConfig:
    st_window_ms: float = 4000
    cl_window_ms: float = 2000
    overlap_long_ms: float = 1000
    bc_max_dur_ms: float = 1000
    bc_isolation_ms: float = 1000
    word_bc_window_ms: float = 80

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0")

    def label_config(self) -> LabelConfig:
        return LabelConfig(eot_lookahead_ms=max(self.st_window_ms, 1e-9), bc_max_dur_ms=self.bc_max_dur_ms,
                           bc_isolation_ms=self.bc_isolation_ms)


def derive_actions(timeline: ActivityTimeline, agent_channel: str, cfg: ActionConfig = ActionConfig()) -> list[ActionEvent]:
    user = other(agent_channel)
    T = len(timeline)
    f = timeline.frames
    st_win, cl_win = f(cfg.st_window_ms), f(cfg.cl_window_ms)
    long_dur, bc_max = f(cfg.overlap_long_ms), f(cfg.bc_max_dur_ms)
    lcfg = cfg.label_config()

    user_segs = extract_segments(timeline, user)
    agent_segs = extract_segments(timeline, agent_channel)
    user_is_bc = bc_segment_mask(user_segs, T, bc_max, f(cfg.bc_isolation_ms))
    agent_floor = floor_taking_segments(timeline, agent_channel, lcfg)
    agent_act = timeline.channel(agent_channel)
    user_act = timeline.channel(user)

    events = []
    for i, seg in enumerate(user_segs):
        o = seg.offset_frame
        if user_is_bc[i] or o >= T:
            continue
        resume = user_segs[i + 1].onset_frame if i + 1 < len(user_segs) else None
        taken = floor_event_after(o, seg.onset_frame, agent_floor)
        if taken is not None and taken - o < st_win and (resume is None or taken <= resume):
            events.append(ActionEvent(seg.last_frame, "ST", agent_channel))
        elif resume is not None and resume - o < cl_win and (taken is None or resume < taken):
            events.append(ActionEvent(seg.last_frame, "CL", agent_channel))

    for seg in user_segs:
        g = seg.onset_frame
        if g > 0 and agent_act[g] and agent_act[g - 1]:
            kind = "SL" if seg.duration >= long_dur else "CT"
            events.append(ActionEvent(g, kind, agent_channel))

    for seg in agent_segs:
        if seg.duration < bc_max and user_act[seg.onset_frame]:
            events.append(ActionEvent(seg.onset_frame, "BC", agent_channel))

    return sorted(events)


def derive_word_level_classes(timeline: ActivityTimeline, boundaries: Sequence[tuple[str, int]],
                              cfg: ActionConfig = ActionConfig()) -> list[str]:
    """Label each (channel, frame) word boundary as continue / backchannel / turn-shift."""
    lcfg = cfg.label_config()
    window = timeline.frames(cfg.word_bc_window_ms)
    per_channel = {}
    for ch in CHANNELS:
        segs = extract_segments(timeline, ch)
        eot_of = {seg.onset_frame: is_eot for seg, is_eot in classify_offsets(timeline, ch, lcfg)}
        mask = bc_segment_mask(segs, len(timeline), timeline.frames(cfg.bc_max_dur_ms),
                               timeline.frames(cfg.bc_isolation_ms))
        bc_onsets = [s.onset_frame for s, m in zip(segs, mask) if m]
        per_channel[ch] = (segs, eot_of, bc_onsets)

    out = []
    for ch, frame in boundaries:
        segs, eot_of, _ = per_channel[ch]
        seg = next((s for s in segs if s.onset_frame <= frame < s.offset_frame), None)
        if seg is None:
            raise ValueError(f"boundary ({ch}, {frame}) lies outside any {ch} segment")
        if seg.last_frame - frame <= 1 and eot_of.get(seg.onset_frame, False):
            out.append("T")
        elif any(frame <= b <= frame + window for b in per_channel[other(ch)][2]):
            out.append("B")
        else:
            out.append("C")
    return out


EVENT_HEADER = ["session_id", "frame", "kind", "agent_channel"]
WORD_HEADER = ["session_id", "channel", "frame"]


def write_events(path, events_by_session: dict[str, Iterable[ActionEvent]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_HEADER)
        for sid, events in events_by_session.items():
            for ev in events:
                w.writerow([sid, ev.frame, ev.kind, ev.agent_channel])


def read_events(path) -> dict[str, list[ActionEvent]]:
    out: dict[str, list[ActionEvent]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["session_id"], []).append(
                ActionEvent(int(row["frame"]), row["kind"], row["agent_channel"]))
    return out


def write_words(path, words_by_session: dict[str, Iterable[tuple[str, int]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WORD_HEADER)
        for sid, words in words_by_session.items():
            for ch, frame in words:
                w.writerow([sid, ch, frame])


def read_words(path) -> dict[str, list[tuple[str, int]]]:
    out: dict[str, list[tuple[str, int]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["session_id"], []).append((row["channel"], int(row["frame"])))
    return out
