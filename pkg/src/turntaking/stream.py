"""Causal streaming inference: 3-frame strides, anchor detection, debounced decisions.

The estimator (a trained model or precomputed "oracle" values) produces the
18 signals per frame.  :class:`DecisionEngine` watches the thresholded VAD
estimates for anchors (user offsets, overlap onsets, agent onsets), asks the
fusion policy for an action at each, and emits decisions through a debounce
gate.  The offline path feeds the same engine, so both agree exactly.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .actions import ActionConfig, derive_actions
from .model.features import FeatureConfig, StreamingFeaturizer
from .model.losses import sigmoid
from .signals import N_SIGNALS, SignalEstimates, column, role_order
from .timeline import DEFAULT_RATE, ActivityTimeline, duration_to_frames, other


@dataclass(frozen=True)
class StreamConfig:
    stride_ms: float = 240
    vad_threshold: float = 0.5
    debounce_strides: int = 1
    min_gap_strides: int = 2

    def __post_init__(self):
        if self.debounce_strides < 1 or self.min_gap_strides < 0:
            raise ValueError("debounce_strides must be >= 1 and min_gap_strides >= 0")

    def stride_frames(self, rate=DEFAULT_RATE) -> int:
        return duration_to_frames(self.stride_ms, rate)


@dataclass(frozen=True)
class Decision:
    kind: str
    stride: int
    frame: int                    # trigger (anchor) frame
    anchor: str
    snapshot: tuple[float, ...]   # 18 role-ordered values the policy saw
    policy: str
    rule: str
    scores: tuple = ()

    def to_json(self) -> str:
        return json.dumps({"stride": self.stride, "frame": self.frame, "action": self.kind,
                           "anchor": self.anchor, "policy": self.policy, "rule": self.rule,
                           "scores": dict(self.scores)}, sort_keys=True)


@dataclass
class _Candidate:
    kind: str
    frame: int
    anchor: str
    row: np.ndarray
    rule: str
    scores: tuple
    age: int = 0


class DecisionEngine:
    """Turns per-frame estimates into decisions; holds no model state."""

    def __init__(self, policy, agent_channel: str = "B", cfg: StreamConfig = StreamConfig()):
        self.policy = policy
        self.agent = agent_channel
        self.user = other(agent_channel)
        self.cfg = cfg
        self.order = role_order(agent_channel)
        self.col_u = column("vad", self.user)
        self.col_a = column("vad", agent_channel)
        self.prev_u = False
        self.prev_a = False
        self.t = 0
        self.stride = 0
        self.pending: list[_Candidate] = []
        self.last_kind: str | None = None
        self.last_stride = -10 ** 9
        self.log: list[Decision] = []

    def _candidate(self, anchor: str, anchor_frame: int, values: np.ndarray) -> _Candidate:
        row = values[self.order]
        kind, rule = self.policy.decide(row, anchor)
        scores = tuple(sorted(self.policy.scores(row).items()))
        return _Candidate(kind, anchor_frame, anchor, row, rule, scores)

    def push(self, block: np.ndarray) -> list[Decision]:
        """Consume one stride of estimates (n, 18); returns decisions emitted at this stride."""
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[1] != N_SIGNALS:
            raise ValueError(f"expected (n, {N_SIGNALS}) estimates")
        thr = self.cfg.vad_threshold
        for row in block:
            u, a = row[self.col_u] > thr, row[self.col_a] > thr
            if self.prev_u and not u:
                self.pending.append(self._candidate("offset", self.t - 1, row))
            if u and not self.prev_u and a and self.prev_a:
                self.pending.append(self._candidate("overlap", self.t, row))
            if a and not self.prev_a and u:
                self.pending.append(self._candidate("agent_onset", self.t, row))
            self.prev_u, self.prev_a = u, a
            self.t += 1
        emitted = []
        keep = []
        for c in self.pending:
            c.age += 1
            if c.age < self.cfg.debounce_strides:
                keep.append(c)
                continue
            if c.kind == self.last_kind and self.stride - self.last_stride < self.cfg.min_gap_strides:
                continue
            d = Decision(c.kind, self.stride, c.frame, c.anchor, tuple(map(float, c.row)),
                         self.policy.policy_id, c.rule, c.scores)
            emitted.append(d)
            self.last_kind, self.last_stride = c.kind, self.stride
        self.pending = keep
        self.stride += 1
        self.log.extend(emitted)
        return emitted


# -- estimators -----------------------------------------------------------------------

class ModelEstimator:
    """Per-stream featurizer + recurrent state around a shared read-only model."""

    def __init__(self, model, feature_cfg: FeatureConfig = FeatureConfig()):
        self.model = model
        self.featurizer = StreamingFeaturizer(feature_cfg)
        self.h = model.initial_state()

    def push(self, a, b) -> np.ndarray:
        feats = self.featurizer.push(a, b)
        out = np.empty((feats.shape[0], N_SIGNALS))
        for i, x in enumerate(feats):
            logits, _, self.h = self.model.step(x, self.h)
            out[i] = logits
        return sigmoid(out)


class OracleEstimator:
    """Replays precomputed estimates (e.g. smoothed labels) frame by frame."""

    def __init__(self, values):
        self.values = values.values if isinstance(values, SignalEstimates) else np.asarray(values, dtype=np.float64)
        self.t = 0

    def push(self, a, b) -> np.ndarray:
        n = len(a)
        out = np.zeros((n, N_SIGNALS))
        chunk = self.values[self.t:self.t + n]
        out[:len(chunk)] = chunk
        self.t += n
        return out


def make_estimator(source, feature_cfg: FeatureConfig = FeatureConfig()):
    if hasattr(source, "step"):
        return ModelEstimator(source, feature_cfg)
    return OracleEstimator(source)


# -- streaming session -----------------------------------------------------------------

@dataclass
class StreamState:
    estimator: object
    engine: DecisionEngine
    stride_frames: int = 3
    frames_consumed: int = 0
    stride_times: list = field(default_factory=list)
    padded_frames: int = 0
    estimates: list = field(default_factory=list)


def new_stream(source, policy, agent_channel: str = "B", cfg: StreamConfig = StreamConfig(),
               feature_cfg: FeatureConfig = FeatureConfig(), rate=DEFAULT_RATE) -> StreamState:
    return StreamState(make_estimator(source, feature_cfg), DecisionEngine(policy, agent_channel, cfg),
                       cfg.stride_frames(rate))


def push_frames(state: StreamState, a, b) -> list[Decision]:
    """Feed one stride of both channels (a shorter final stride is padded with silence)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("channel blocks differ in length")
    n = a.size
    if n == 0:
        return []
    if n > state.stride_frames:
        raise ValueError(f"at most {state.stride_frames} frames per push")
    pad = state.stride_frames - n
    t0 = time.perf_counter()
    if pad:
        a = np.r_[a, np.zeros(pad, dtype=a.dtype)]
        b = np.r_[b, np.zeros(pad, dtype=b.dtype)]
        state.padded_frames += pad
    est = state.estimator.push(a, b)[:n]   # padding advances state but never reaches the policy
    decisions = state.engine.push(est)
    state.stride_times.append(time.perf_counter() - t0)
    state.frames_consumed += n
    state.estimates.append(est)
    return decisions


def timing_report(state: StreamState, rate=DEFAULT_RATE) -> dict:
    times = np.asarray(state.stride_times)
    audio_s = state.frames_consumed / float(rate.frames_per_second)
    total = float(times.sum()) if times.size else 0.0
    return {
        "strides": int(times.size),
        "stride_frames": state.stride_frames,
        "p50_ms": float(np.percentile(times, 50) * 1e3) if times.size else 0.0,
        "p95_ms": float(np.percentile(times, 95) * 1e3) if times.size else 0.0,
        "total_s": total,
        "audio_s": audio_s,
        "real_time_factor": total / audio_s if audio_s > 0 else 0.0,
        "padded_final_stride": state.padded_frames > 0,
        "padded_frames": state.padded_frames,
    }


def run_session(source, policy, timeline: ActivityTimeline, agent_channel: str = "B",
                cfg: StreamConfig = StreamConfig(), feature_cfg: FeatureConfig = FeatureConfig(),
                stop_after_frames: int | None = None):
    """Stream a whole session.  Returns (decisions, timing report, estimates (T, 18))."""
    state = new_stream(source, policy, agent_channel, cfg, feature_cfg, timeline.rate)
    T = len(timeline) if stop_after_frames is None else min(stop_after_frames, len(timeline))
    k = state.stride_frames
    for s in range(0, T, k):
        e = min(s + k, T)
        push_frames(state, timeline.a[s:e], timeline.b[s:e])
    est = np.concatenate(state.estimates) if state.estimates else np.zeros((0, N_SIGNALS))
    return list(state.engine.log), timing_report(state, timeline.rate), est


def decide_offline(estimates, policy, agent_channel: str = "B", cfg: StreamConfig = StreamConfig(),
                   rate=DEFAULT_RATE) -> list[Decision]:
    """Policy evaluation over precomputed (T, 18) estimates, stride by stride."""
    values = estimates.values if isinstance(estimates, SignalEstimates) else np.asarray(estimates, dtype=np.float64)
    engine = DecisionEngine(policy, agent_channel, cfg)
    k = cfg.stride_frames(rate)
    for s in range(0, values.shape[0], k):
        engine.push(values[s:s + k])
    return list(engine.log)


def offline_estimates(model, timeline: ActivityTimeline, feature_cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    from .model.features import featurize
    probs, _, _ = model.run(featurize(timeline, feature_cfg))
    return probs


def write_decision_log(path, decisions: Iterable[Decision]) -> None:
    with open(path, "w") as fh:
        for d in decisions:
            fh.write(d.to_json() + "\n")


def read_decision_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- anticipation ----------------------------------------------------------------------

def _delta_frames(delta_ms: float, rate) -> int:
    n = duration_to_frames(abs(delta_ms), rate)
    return n if delta_ms >= 0 else -n


def anticipation_trace(estimates, timeline: ActivityTimeline, offsets_ms: Sequence[float], policy,
                       agent_channel: str = "B", action_cfg: ActionConfig = ActionConfig()):
    """Per offset delta: [(ST score, is_shift)] at each truth ST/CL user offset.

    Returns (traces, skipped) where skipped counts out-of-session frames per delta.
    """
    values = estimates.values if isinstance(estimates, SignalEstimates) else np.asarray(estimates, dtype=np.float64)
    order = role_order(agent_channel)
    anchors = [e for e in derive_actions(timeline, agent_channel, action_cfg) if e.kind in ("ST", "CL")]
    traces, skipped = {}, {}
    T = values.shape[0]
    for delta in offsets_ms:
        df = _delta_frames(delta, timeline.rate)
        rows, miss = [], 0
        for ev in anchors:
            f = ev.frame + df
            if not 0 <= f < T:
                miss += 1
                continue
            rows.append((policy.st_score(values[f][order]), int(ev.kind == "ST")))
        traces[delta] = rows
        skipped[delta] = miss
    return traces, skipped
