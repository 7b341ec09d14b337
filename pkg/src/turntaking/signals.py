"""The 18 per-frame turn-taking signals shared by labels and model outputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .timeline import CHANNELS

SIGNAL_NAMES = ("eot", "hold", "bot", "bc", "vad", "fvad0", "fvad1", "fvad2", "fvad3")
SPARSE_SIGNALS = ("eot", "hold", "bot", "bc")
N_PER_CHANNEL = len(SIGNAL_NAMES)
N_SIGNALS = 2 * N_PER_CHANNEL


def column(signal: str, channel: str) -> int:
    return CHANNELS.index(channel) * N_PER_CHANNEL + SIGNAL_NAMES.index(signal)


def column_names() -> list[str]:
    return [f"{s}_{ch}" for ch in CHANNELS for s in SIGNAL_NAMES]


def role_order(agent_channel: str) -> np.ndarray:
    """Column permutation putting the user's 9 signals first, then the agent's."""
    user = 1 - CHANNELS.index(agent_channel)
    agent = CHANNELS.index(agent_channel)
    return np.concatenate([np.arange(N_PER_CHANNEL) + user * N_PER_CHANNEL,
                           np.arange(N_PER_CHANNEL) + agent * N_PER_CHANNEL])


def role_column_names() -> list[str]:
    return [f"{s}_{r}" for r in ("u", "a") for s in SIGNAL_NAMES]


def swap_columns(values: np.ndarray) -> np.ndarray:
    return np.concatenate([values[..., N_PER_CHANNEL:], values[..., :N_PER_CHANNEL]], axis=-1)


@dataclass(frozen=True, eq=False)
class SignalEstimates:
    """Per-frame values of all 18 signals, shape ``(T, 18)``, channel A first."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != N_SIGNALS:
            raise ValueError(f"expected (T, {N_SIGNALS}) array, got {v.shape}")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def get(self, signal: str, channel: str) -> np.ndarray:
        return self.values[:, column(signal, channel)]

    def fvad(self, channel: str) -> np.ndarray:
        c = column("fvad0", channel)
        return self.values[:, c:c + 4]

    def swapped(self) -> "SignalEstimates":
        return SignalEstimates(swap_columns(self.values))

    def by_role(self, agent_channel: str) -> np.ndarray:
        return self.values[:, role_order(agent_channel)]
