"""Model-level measurements used by the ablation harness and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .actions import derive_actions
from .evaluation import anticipation_report, binary_cm, eval_agent_actions
from .fusion import default_rules
from .labels import LabelConfig, derive_bc, derive_bot
from .model.losses import sigmoid
from .model.network import ModelConfig
from .model.train import SessionArrays, TrainConfig, TrainResult, pretrain_stage1, train_variant
from .signals import column
from .stream import anticipation_trace, decide_offline
from .timeline import CHANNELS, extract_segments

ANTICIPATION_DELTAS_MS = (-960, -720, -480, -240, 0)


def predict(model, sessions: Sequence[SessionArrays]) -> list[np.ndarray]:
    """(T, 18) probabilities per session from the batched forward pass."""
    return [sigmoid(model.forward(s.features)[0][0]) for s in sessions]


def _f1(tp, fp, fn) -> float:
    d = 2 * tp + fp + fn
    return 2 * tp / d if d else 0.0


def onset_signal_f1(sessions: Sequence[SessionArrays], probs: Sequence[np.ndarray], threshold: float = 0.5,
                    label_cfg: LabelConfig = LabelConfig()) -> dict:
    """BC and BOT detection F1 at every segment onset (estimate > threshold vs impulse)."""
    counts = {"bc": [0, 0, 0], "bot": [0, 0, 0]}
    for s, p in zip(sessions, probs):
        for ch in CHANNELS:
            onsets = [seg.onset_frame for seg in extract_segments(s.timeline, ch)]
            truth = {"bc": derive_bc(s.timeline, ch, label_cfg), "bot": derive_bot(s.timeline, ch, label_cfg)}
            for sig in counts:
                est = p[onsets, column(sig, ch)] > threshold
                tru = truth[sig][onsets].astype(bool)
                c = counts[sig]
                c[0] += int((est & tru).sum())
                c[1] += int((est & ~tru).sum())
                c[2] += int((~est & tru).sum())
    out = {f"{k}_f1": _f1(*v) for k, v in counts.items()}
    out["bc_bot_f1"] = (out["bc_f1"] + out["bot_f1"]) / 2
    return out


def vad_accuracy(sessions: Sequence[SessionArrays], probs: Sequence[np.ndarray]) -> float:
    hit = n = 0
    for s, p in zip(sessions, probs):
        for ch in CHANNELS:
            hit += int(((p[:, column("vad", ch)] > 0.5) == s.timeline.channel(ch).astype(bool)).sum())
            n += len(s)
    return hit / n


def action_report(sessions: Sequence[SessionArrays], probs: Sequence[np.ndarray], policy=None):
    policy = policy or default_rules()
    truth, preds = {}, {}
    for i, (s, p) in enumerate(zip(sessions, probs)):
        for ag in CHANNELS:
            truth[(i, ag)] = derive_actions(s.timeline, ag)
            preds[(i, ag)] = decide_offline(p, policy, ag)
    return eval_agent_actions(truth, preds)


def anticipation_rows(sessions: Sequence[SessionArrays], probs: Sequence[np.ndarray],
                      deltas_ms: Sequence[float] = ANTICIPATION_DELTAS_MS, policy=None) -> list[dict]:
    policy = policy or default_rules()
    pooled = {d: [] for d in deltas_ms}
    for s, p in zip(sessions, probs):
        for ag in CHANNELS:
            traces, _ = anticipation_trace(p, s.timeline, deltas_ms, policy, ag)
            for d in deltas_ms:
                pooled[d].extend(traces[d])
    return anticipation_report(pooled)


def summarize(sessions: Sequence[SessionArrays], model) -> dict:
    probs = predict(model, sessions)
    rep = action_report(sessions, probs)
    out = {"wf1": rep.wf1, "action_bc_f1": rep.per_class_f1["BC"], "vad_acc": vad_accuracy(sessions, probs)}
    out.update(onset_signal_f1(sessions, probs))
    out.update({f"ant_{r['delta_ms']}": r["auc"] for r in anticipation_rows(sessions, probs)})
    return out


@dataclass
class AblationRow:
    variant: str
    seed: int
    metrics: dict
    stage1_best_epoch: int | None
    stage2_best_epoch: int
    losses: dict = field(default_factory=dict)   # stage -> {split: per-epoch totals}
    model: object = None


def run_ablation(variants: Sequence[str], seeds: Sequence[int], train: Sequence[SessionArrays],
                 val: Sequence[SessionArrays], test: Sequence[SessionArrays],
                 cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
                 keep_models: bool = False) -> list[AblationRow]:
    """Train each variant per seed (sharing one stage-1 run per seed) and score on ``test``."""
    rows = []
    for seed in seeds:
        cfg_s = replace(cfg, seed=seed)
        mcfg = replace(model_cfg, seed=seed)
        shared: TrainResult | None = None
        for v in variants:
            s1, s2 = train_variant(v, train, val, cfg_s, mcfg, stage1=shared if v != "D-analog" else None)
            if s1 is not None and v in ("A", "B", "E"):
                shared = s1
            losses = {r.stage: {sp: r.losses(sp) for sp in ("train", "val")} for r in (s1, s2) if r is not None}
            rows.append(AblationRow(v, seed, summarize(test, s2.model),
                                    None if s1 is None else s1.best_epoch, s2.best_epoch, losses,
                                    s2.model if keep_models else None))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> list[dict]:
    """Seed-mean metrics per variant."""
    out = []
    for v in dict.fromkeys(r.variant for r in rows):
        rs = [r for r in rows if r.variant == v]
        keys = rs[0].metrics.keys()
        row = {"variant": v, "n_seeds": len(rs)}
        row.update({k: float(np.mean([r.metrics[k] for r in rs])) for k in keys})
        out.append(row)
    return out
