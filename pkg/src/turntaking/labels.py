"""Self-supervised per-channel turn-taking labels derived from voice activity.

Sparse signals (EOT, HOLD, BOT, BC) start life as binary impulses and are then
spread with an asymmetric Gaussian so the targets rise a few frames before the
event and fall off quickly after it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .signals import N_PER_CHANNEL, SIGNAL_NAMES, SignalEstimates
from .timeline import CHANNELS, ActivityTimeline, SpeechSegment, duration_to_frames, extract_segments, other

FVAD_HORIZONS_MS = ((0, 240), (240, 480), (480, 960), (960, 2000))


@dataclass(frozen=True)
class LabelConfig:
    eot_lookahead_ms: float = 4000
    bot_min_dur_ms: float = 1000
    bc_max_dur_ms: float = 1000
    bc_isolation_ms: float = 1000
    smooth_sigma_before_frames: float = 3
    smooth_sigma_after_frames: float = 1
    smooth_truncation_sigmas: float = 3

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.eot_lookahead_ms <= 0:
            raise ValueError("eot_lookahead_ms must be > 0")


def _last_active(x: np.ndarray) -> np.ndarray:
    """last_active[t] = largest i <= t with x[i] == 1, or -1."""
    idx = np.where(x.astype(bool), np.arange(x.size), -1)
    return np.maximum.accumulate(idx) if x.size else idx


def bc_segment_mask(segments: list[SpeechSegment], length: int, max_dur: int, isolation: int) -> list[bool]:
    """Which segments are isolated short utterances (the BC signal's condition).

    Session boundaries count as silence.
    """
    flags = []
    for i, seg in enumerate(segments):
        if seg.duration > max_dur:
            flags.append(False)
            continue
        before = seg.onset_frame - segments[i - 1].offset_frame if i > 0 else math.inf
        after = segments[i + 1].onset_frame - seg.offset_frame if i + 1 < len(segments) else math.inf
        flags.append(before >= isolation and after >= isolation)
    return flags


def floor_taking_segments(timeline: ActivityTimeline, channel: str, cfg: LabelConfig) -> list[SpeechSegment]:
    """Segments on ``channel`` that can take the floor, i.e. everything except BCs."""
    segs = extract_segments(timeline, channel)
    mask = bc_segment_mask(segs, len(timeline), timeline.frames(cfg.bc_max_dur_ms),
                           timeline.frames(cfg.bc_isolation_ms))
    return [s for s, is_bc in zip(segs, mask) if not is_bc]


def floor_event_after(offset: int, seg_onset: int, floor_segs: list[SpeechSegment]) -> int | None:
    """First frame >= ``offset`` at which another-channel floor segment holds the floor.

    Only segments that began after ``seg_onset`` count; one already running
    when ``offset`` arrives takes the floor at ``offset`` itself.
    """
    best = None
    for seg in floor_segs:
        if seg.onset_frame <= seg_onset or seg.offset_frame <= offset:
            continue
        eff = max(seg.onset_frame, offset)
        if best is None or eff < best:
            best = eff
        if seg.onset_frame >= offset:
            break
    return best


def classify_offsets(timeline: ActivityTimeline, channel: str, cfg: LabelConfig) -> list[tuple[SpeechSegment, bool]]:
    """(segment, is_eot) for every segment on ``channel`` with an observed offset."""
    T = len(timeline)
    lookahead = timeline.frames(cfg.eot_lookahead_ms)
    segs = extract_segments(timeline, channel)
    floor = floor_taking_segments(timeline, other(channel), cfg)
    out = []
    for i, seg in enumerate(segs):
        o = seg.offset_frame
        if o >= T:
            continue  # speech runs into the session end: no observed offset
        resume = segs[i + 1].onset_frame if i + 1 < len(segs) else None
        taken = floor_event_after(o, seg.onset_frame, floor)
        eot = (taken is not None and taken - o < lookahead
               and (resume is None or taken <= resume))
        out.append((seg, eot))
    return out


def derive_eot_hold(timeline: ActivityTimeline, channel: str, cfg: LabelConfig = LabelConfig()):
    """EOT / HOLD impulses, placed on the last active frame of each segment."""
    T = len(timeline)
    eot = np.zeros(T, dtype=np.uint8)
    hold = np.zeros(T, dtype=np.uint8)
    for seg, is_eot in classify_offsets(timeline, channel, cfg):
        (eot if is_eot else hold)[seg.last_frame] = 1
    return eot, hold


def derive_bot(timeline: ActivityTimeline, channel: str, cfg: LabelConfig = LabelConfig()) -> np.ndarray:
    T = len(timeline)
    out = np.zeros(T, dtype=np.uint8)
    min_dur = timeline.frames(cfg.bot_min_dur_ms)
    same_last = _last_active(timeline.channel(channel))
    other_last = _last_active(timeline.channel(other(channel)))
    for seg in extract_segments(timeline, channel):
        f = seg.onset_frame
        if seg.duration < min_dur or f == 0:
            continue
        theirs, ours = other_last[f - 1], same_last[f - 1]
        if theirs >= 0 and theirs >= ours:
            out[f] = 1
    return out


def derive_bc(timeline: ActivityTimeline, channel: str, cfg: LabelConfig = LabelConfig()) -> np.ndarray:
    out = np.zeros(len(timeline), dtype=np.uint8)
    segs = extract_segments(timeline, channel)
    mask = bc_segment_mask(segs, len(timeline), timeline.frames(cfg.bc_max_dur_ms),
                           timeline.frames(cfg.bc_isolation_ms))
    for seg, is_bc in zip(segs, mask):
        if is_bc:
            out[seg.onset_frame] = 1
    return out


def fvad_windows(rate) -> list[tuple[int, int]]:
    return [(duration_to_frames(lo, rate), duration_to_frames(hi, rate)) for lo, hi in FVAD_HORIZONS_MS]


def derive_fvad(timeline: ActivityTimeline, channel: str, cfg: LabelConfig = LabelConfig()) -> np.ndarray:
    """Mean future activity over four horizons, shape (T, 4).

    Windows are clipped at the session end; an empty window gives 0.
    """
    vad = timeline.channel(channel).astype(np.float64)
    T = vad.size
    csum = np.concatenate([[0.0], np.cumsum(vad)])
    t = np.arange(T)
    out = np.zeros((T, 4))
    for k, (lo, hi) in enumerate(fvad_windows(timeline.rate)):
        start = np.minimum(t + lo, T)
        stop = np.minimum(t + hi, T)
        n = stop - start
        total = csum[stop] - csum[start]
        out[:, k] = np.divide(total, n, out=np.zeros(T), where=n > 0)
    return out


def smoothing_kernel(cfg: LabelConfig = LabelConfig()) -> dict[int, float]:
    """Offset ``t - e`` -> weight, truncated at ``smooth_truncation_sigmas`` sigma."""
    sb, sa = cfg.smooth_sigma_before_frames, cfg.smooth_sigma_after_frames
    kernel = {0: 1.0}
    for k in range(1, int(math.floor(cfg.smooth_truncation_sigmas * sb)) + 1):
        kernel[-k] = math.exp(-k * k / (2 * sb * sb))
    for k in range(1, int(math.floor(cfg.smooth_truncation_sigmas * sa)) + 1):
        kernel[k] = math.exp(-k * k / (2 * sa * sa))
    return kernel


def smooth_impulses(impulses, cfg: LabelConfig = LabelConfig()) -> np.ndarray:
    """Spread binary impulses with the asymmetric Gaussian; overlapping kernels combine by max."""
    imp = np.asarray(impulses)
    T = imp.size
    out = np.zeros(T)
    hit = imp.astype(bool)
    for k, w in smoothing_kernel(cfg).items():
        # label[t] gets w where an event sits at e = t - k
        if abs(k) >= T and T:
            continue
        if k >= 0:
            src, dst = hit[:T - k] if k else hit, slice(k, T)
        else:
            src, dst = hit[-k:], slice(0, T + k)
        np.maximum(out[dst], np.where(src, w, 0.0), out=out[dst])
    return out


@dataclass(frozen=True, eq=False)
class SignalLabels:
    """Targets for both channels. Arrays are indexed ``[channel, frame]``."""

    eot: np.ndarray
    hold: np.ndarray
    bot: np.ndarray
    bc: np.ndarray
    vad: np.ndarray
    fvad: np.ndarray  # (2, T, 4)
    impulses: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.vad.shape[1]

    def matrix(self) -> np.ndarray:
        cols = []
        for c in range(2):
            cols += [self.eot[c], self.hold[c], self.bot[c], self.bc[c], self.vad[c].astype(np.float64)]
            cols += [self.fvad[c, :, k] for k in range(4)]
        return np.stack(cols, axis=1) if len(self) else np.zeros((0, 2 * N_PER_CHANNEL))

    def as_estimates(self) -> SignalEstimates:
        return SignalEstimates(self.matrix())


def derive_all(timeline: ActivityTimeline, cfg: LabelConfig = LabelConfig()) -> SignalLabels:
    parts = {name: [] for name in ("eot", "hold", "bot", "bc")}
    vad, fvad = [], []
    for ch in CHANNELS:
        e, h = derive_eot_hold(timeline, ch, cfg)
        parts["eot"].append(e)
        parts["hold"].append(h)
        parts["bot"].append(derive_bot(timeline, ch, cfg))
        parts["bc"].append(derive_bc(timeline, ch, cfg))
        vad.append(timeline.channel(ch))
        fvad.append(derive_fvad(timeline, ch, cfg))
    impulses = {k: np.stack(v) for k, v in parts.items()}
    smoothed = {k: np.stack([smooth_impulses(x, cfg) for x in v]) for k, v in parts.items()}
    return SignalLabels(vad=np.stack(vad), fvad=np.stack(fvad), impulses=impulses, **smoothed)


LABEL_HEADER = ["frame", "ch", "eot", "hold", "bot", "bc", "vad", "fvad0", "fvad1", "fvad2", "fvad3"]


def write_label_csv(path, labels) -> None:
    """Dump labels (or any (T, 18) signal matrix) one row per frame and channel."""
    values = labels.matrix() if isinstance(labels, SignalLabels) else np.asarray(labels, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_HEADER)
        for c, ch in enumerate(CHANNELS):
            block = values[:, c * N_PER_CHANNEL:(c + 1) * N_PER_CHANNEL]
            for t, vals in enumerate(block):
                w.writerow([t, ch, *(f"{float(v):.6f}" for v in vals)])


def read_label_csv(path) -> np.ndarray:
    """Read a label dump back into a (T, 18) matrix."""
    rows = {ch: [] for ch in CHANNELS}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows[row["ch"]].append([float(row[k]) for k in LABEL_HEADER[2:]])
    return np.concatenate([np.asarray(rows[ch]).reshape(-1, N_PER_CHANNEL) for ch in CHANNELS], axis=1)
