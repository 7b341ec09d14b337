"""Causal per-frame features computed from dual-channel activity.

Per channel: current activity, three exponential moving averages of activity,
time since the current run began, and time since the last run ended.  The two
timers are clipped at ``cap`` frames and divided by it; before any speech both
sit at 1 (saturated).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..timeline import ActivityTimeline

FEATURES_PER_CHANNEL = 6


@dataclass(frozen=True)
class FeatureConfig:
    time_constants: tuple[float, ...] = (2.0, 8.0, 32.0)
    cap_frames: int = 50

    @property
    def dim(self) -> int:
        return 2 * (3 + len(self.time_constants))


class StreamingFeaturizer:
    """Incremental featurizer; ``push`` one frame at a time or a block of frames."""

    def __init__(self, cfg: FeatureConfig = FeatureConfig()):
        self.cfg = cfg
        self.alpha = np.exp(-1.0 / np.asarray(cfg.time_constants, dtype=np.float64))
        self.ema = np.zeros((2, len(cfg.time_constants)))
        self.run_len = np.zeros(2)          # frames into the current active run
        self.silence_len = np.full(2, float(cfg.cap_frames))
        self.t = 0

    def push_frame(self, a: int, b: int) -> np.ndarray:
        cap = float(self.cfg.cap_frames)
        x = np.array([a, b], dtype=np.float64)
        self.ema = self.alpha * self.ema + (1.0 - self.alpha) * x[:, None]
        active = x > 0
        self.run_len = np.where(active, np.where(self.run_len > 0, self.run_len + 1, 1.0), 0.0)
        self.silence_len = np.where(active, 0.0, np.minimum(self.silence_len + 1, cap))
        since_onset = np.where(active, np.minimum(self.run_len - 1, cap), cap) / cap
        since_offset = self.silence_len / cap
        self.t += 1
        feats = np.concatenate([x[:, None], self.ema, since_onset[:, None], since_offset[:, None]], axis=1)
        return feats.reshape(-1)

    def push(self, a, b) -> np.ndarray:
        a = np.asarray(a)
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ValueError("channel blocks must have the same length")
        if a.size == 0:
            return np.zeros((0, self.cfg.dim))
        return np.stack([self.push_frame(int(x), int(y)) for x, y in zip(a, b)])


def featurize(timeline: ActivityTimeline, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """(T, 12) features; row t depends on activity at frames <= t only."""
    return StreamingFeaturizer(cfg).push(timeline.a, timeline.b)


def swap_feature_blocks(feats: np.ndarray) -> np.ndarray:
    half = feats.shape[-1] // 2
    return np.concatenate([feats[..., half:], feats[..., :half]], axis=-1)
