"""Pipeline configuration: one JSON file with a section per component.

Unknown keys are rejected.  The effective configuration (defaults filled in)
is hashed, and the hash plus the global seed are embedded in every artifact.
A single global ``seed`` drives the generator, model initialisation and
training; section-level seed fields are not accepted.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .actions import ActionConfig
from .evaluation import VapConfig
from .labels import LabelConfig
from .model.features import FeatureConfig
from .model.network import ModelConfig
from .model.train import TrainConfig
from .stream import StreamConfig
from .synth import GeneratorConfig

CONFIG_ENV = "TURNTAKING_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FusionSettings:
    policy: str = "heuristic"          # "heuristic" or "lr"
    rules_path: str | None = None      # JSON rules file; None = built-in defaults
    lr_l2: float = 1e-3
    lr_class_weight: str | None = None
    lr_max_iter: int = 5000

    def __post_init__(self):
        if self.policy not in ("heuristic", "lr"):
            raise ConfigError("fusion.policy must be 'heuristic' or 'lr'")
        if self.lr_class_weight not in (None, "balanced"):
            raise ConfigError("fusion.lr_class_weight must be null or 'balanced'")
        if self.lr_l2 < 0:
            raise ConfigError("fusion.lr_l2 must be >= 0")


@dataclass(frozen=True)
class EvalSettings:
    match_window_ms: float = 240
    vap_window_ms: float = 1000
    bc_pred_lead_ms: float = 240
    anticipation_deltas_ms: tuple[float, ...] = (-960, -720, -480, -240, 0)


@dataclass(frozen=True)
class CorpusSettings:
    n_sessions: int = 100
    val_fraction: float = 0.2
    ablation_train: int = 80
    ablation_val: int = 40
    ablation_test: int = 30

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ConfigError("corpus.val_fraction must lie in (0, 1)")


SECTIONS = {
    "labels": LabelConfig,
    "actions": ActionConfig,
    "generator": GeneratorConfig,
    "features": FeatureConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "fusion": FusionSettings,
    "stream": StreamConfig,
    "eval": EvalSettings,
    "corpus": CorpusSettings,
}
SEEDED = ("generator", "model", "train")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    labels: LabelConfig = LabelConfig()
    actions: ActionConfig = ActionConfig()
    generator: GeneratorConfig = GeneratorConfig()
    features: FeatureConfig = FeatureConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    fusion: FusionSettings = FusionSettings()
    stream: StreamConfig = StreamConfig()
    eval: EvalSettings = EvalSettings()
    corpus: CorpusSettings = CorpusSettings()

    def __post_init__(self):
        for name in SEEDED:
            sec = getattr(self, name)
            if sec.seed != self.seed:
                object.__setattr__(self, name, replace(sec, seed=self.seed))

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            if name in SEEDED:
                d.pop("seed")
            if name == "train":
                d["loss_weights"] = dict(d["loss_weights"])
            out[name] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed}


def _build(cls, name: str, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)} - ({"seed"} if name in SEEDED else set())
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(unknown)}")
    kw = dict(raw)
    if name == "train" and "loss_weights" in kw:
        lw = kw["loss_weights"]
        if not isinstance(lw, dict):
            raise ConfigError("train.loss_weights must be an object {signal: weight}")
        kw["loss_weights"] = tuple(sorted(lw.items()))
    for key in ("time_constants", "anticipation_deltas_ms"):
        if key in kw:
            kw[key] = tuple(kw[key])
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def config_from_dict(obj: dict) -> PipelineConfig:
    if not isinstance(obj, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(obj) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    seed = obj.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    kw = {"seed": seed}
    for name, cls in SECTIONS.items():
        raw = dict(obj.get(name, {}))
        if name in SEEDED:
            if "seed" in raw:
                raise ConfigError(f"section {name!r} must not set 'seed'; use the global seed")
            raw["seed"] = seed
            sec = _build(cls, name, {k: v for k, v in raw.items() if k != "seed"})
            kw[name] = replace(sec, seed=seed)
        else:
            kw[name] = _build(cls, name, raw)
    return PipelineConfig(**kw)


def load_config(path: str | os.PathLike | None = None) -> PipelineConfig:
    """Read a config file; with no path, fall back to $TURNTAKING_CONFIG, then defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return config_from_dict(obj)
