"""Two-stage training: next-frame activity pretraining, then signal-head fine-tuning.

Stage 1 fits the backbone and the generative head to predict both channels'
activity at t+1 from features up to t.  Stage 2 drops the generative head
(unless an auxiliary weight keeps it), and fits the 12 signal heads with focal
loss on the sparse signals and BCE on the dense ones.  Both stages use Adam on
random fixed-length crops and keep the best epoch.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from ..labels import LabelConfig, derive_all
from ..signals import SIGNAL_NAMES, column
from ..timeline import CHANNELS, ActivityTimeline
from .features import FeatureConfig, featurize
from .losses import bce_logits, focal_loss_logits, sigmoid
from .network import DENSE_HEADS, SPARSE_HEADS, ModelConfig, SequenceModel

CHECKPOINT_VERSION = 1
PRNG_ID = "numpy.random.PCG64"
STAGES = ("init", "stage1", "stage2")


class TrainingDiverged(RuntimeError):
    pass


class StageOrderError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_stage1: float = 3e-3
    lr_stage2: float = 3e-3
    batch_size: int = 16
    crop_frames: int = 256
    steps_per_epoch: int = 40
    max_epochs_stage1: int = 8
    max_epochs_stage2: int = 8
    patience: int = 3
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    loss_weights: tuple[tuple[str, float], ...] = ()
    stage2_freeze_backbone: bool = False
    aux_generative_weight: float = 0.0
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise ValueError("learning rates must be > 0")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0 < self.focal_alpha < 1:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.aux_generative_weight < 0:
            raise ValueError("aux_generative_weight must be >= 0")
        if min(self.batch_size, self.crop_frames, self.steps_per_epoch) < 1:
            raise ValueError("batch_size, crop_frames and steps_per_epoch must be >= 1")
        for name, w in self.loss_weights:
            if name not in ("eot", "hold", "bot", "bc", "vad", "fvad"):
                raise ValueError(f"unknown loss-weight signal {name!r}")
            if w < 0:
                raise ValueError("loss weights must be >= 0")

    def weight(self, signal: str) -> float:
        return dict(self.loss_weights).get(signal, 1.0)


# -- data ---------------------------------------------------------------------------

@dataclass
class SessionArrays:
    timeline: ActivityTimeline
    features: np.ndarray      # (T, 12)
    targets: np.ndarray       # (T, 18) smoothed labels
    next_vad: np.ndarray      # (T, 2) activity at t+1 (last row unused)

    def __len__(self):
        return self.features.shape[0]


def prepare(timelines: Sequence[ActivityTimeline], feature_cfg: FeatureConfig = FeatureConfig(),
            label_cfg: LabelConfig = LabelConfig()) -> list[SessionArrays]:
    out = []
    for tl in timelines:
        X = featurize(tl, feature_cfg)
        Y = derive_all(tl, label_cfg).matrix()
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"{tl.session_id}: label/feature length mismatch")
        nxt = np.zeros((len(tl), 2))
        nxt[:-1] = np.stack([tl.a, tl.b], axis=1)[1:]
        out.append(SessionArrays(tl, X, Y, nxt))
    return out


def _stack(sessions: Sequence[SessionArrays], starts: Sequence[int], length: int):
    X = np.stack([s.features[a:a + length] for s, a in zip(sessions, starts)])
    Y = np.stack([s.targets[a:a + length] for s, a in zip(sessions, starts)])
    V = np.stack([s.next_vad[a:a + length] for s, a in zip(sessions, starts)])
    mask = np.ones(X.shape[:2])
    for i, (s, a) in enumerate(zip(sessions, starts)):
        if a + length >= len(s):
            mask[i, len(s) - a - 1:] = 0.0   # no next frame after the session end
    return X, Y, V, mask


def sample_batch(data: Sequence[SessionArrays], cfg: TrainConfig, rng):
    length = min(cfg.crop_frames, min(len(s) for s in data))
    idx = rng.integers(0, len(data), size=cfg.batch_size)
    sessions = [data[i] for i in idx]
    starts = [int(rng.integers(0, len(s) - length + 1)) for s in sessions]
    return _stack(sessions, starts, length)


def full_batches(data: Sequence[SessionArrays], max_batch: int = 32):
    """Whole sessions grouped by length."""
    by_len: dict[int, list[SessionArrays]] = {}
    for s in data:
        by_len.setdefault(len(s), []).append(s)
    for length, group in sorted(by_len.items()):
        for i in range(0, len(group), max_batch):
            chunk = group[i:i + max_batch]
            yield _stack(chunk, [0] * len(chunk), length)


# -- losses ----------------------------------------------------------------------------

HEAD_KEYS = [f"{h.name}_{h.channel}" for h in SPARSE_HEADS + DENSE_HEADS]


def stage1_loss(gen_logits, V, mask):
    """Mean BCE of next-frame activity over valid frames and both channels."""
    loss, d = bce_logits(gen_logits, V)
    m = mask[..., None]
    denom = 2.0 * mask.sum()
    return float((loss * m).sum() / denom), d * m / denom


def stage2_loss(logits, Y, mask, cfg: TrainConfig):
    """Weighted sum over heads of per-column mean losses; returns (total, per-head, dlogits)."""
    denom = mask.sum()
    m = mask[..., None]
    dlogits = np.zeros_like(logits)
    parts = {}
    total = 0.0
    for h in SPARSE_HEADS:
        c = h.columns[0]
        w = cfg.weight(h.name)
        l, d = focal_loss_logits(logits[..., c], Y[..., c], cfg.focal_gamma, cfg.focal_alpha)
        val = float((l * mask).sum() / denom)
        parts[f"{h.name}_{h.channel}"] = val
        total += w * val
        dlogits[..., c] = w * d * mask / denom
    for h in DENSE_HEADS:
        cols = list(h.columns)
        w = cfg.weight(h.name)
        l, d = bce_logits(logits[..., cols], Y[..., cols])
        val = float((l * m).sum() / denom)
        parts[f"{h.name}_{h.channel}"] = val
        total += w * val
        dlogits[..., cols] = w * d * m / denom
    return total, parts, dlogits


def batch_loss(model: SequenceModel, batch, cfg: TrainConfig, stage: int, backbone: bool = True,
               need_grads: bool = True):
    """(total loss, parts, grads or None) for one batch at the given stage."""
    X, Y, V, mask = batch
    logits, gen, cache = model.forward(X)
    parts = {}
    dgen = None
    if stage == 1:
        total, dgen = stage1_loss(gen, V, mask)
        parts["gen"] = total
        dlogits = np.zeros_like(logits)
    else:
        total, parts, dlogits = stage2_loss(logits, Y, mask, cfg)
        if model.has_generative_head and cfg.aux_generative_weight > 0:
            g, dgen = stage1_loss(gen, V, mask)
            parts["gen"] = g
            total += cfg.aux_generative_weight * g
            dgen = dgen * cfg.aux_generative_weight
    parts["total"] = total
    if not need_grads:
        return total, parts, None
    return total, parts, model.backward(cache, dlogits, dgen, backbone=backbone)


# -- optimizer ----------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, clip_norm: float | None = None) -> float:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = clip_norm / norm if clip_norm and norm > clip_norm else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            g = g * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm


# -- stages ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SequenceModel
    curve: list[dict]              # one row per (epoch, split)
    best_epoch: int
    stage: int

    def losses(self, split: str = "train") -> list[float]:
        return [r["loss_total"] for r in self.curve if r["split"] == split]

    def log_csv(self) -> str:
        cols = ["epoch", "split", "loss_total"] + [f"loss_{k}" for k in HEAD_KEYS + ["gen"]] + ["wf1_heuristic"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.curve:
            w.writerow({c: r.get(c, "") for c in cols})
        return buf.getvalue()


def _mean_loss(model, batches, cfg, stage):
    tot, parts_sum, n = 0.0, {}, 0
    for b in batches:
        weight = float(b[3].sum())
        loss, parts, _ = batch_loss(model, b, cfg, stage, need_grads=False)
        tot += loss * weight
        for k, v in parts.items():
            parts_sum[k] = parts_sum.get(k, 0.0) + v * weight
        n += weight
    return tot / n, {k: v / n for k, v in parts_sum.items()}


def _check_finite(loss: float, stage: int, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"stage {stage} loss became {loss} at epoch {epoch}, step {step}; "
                               "try a lower learning rate or a smaller clip_norm")


def _row(epoch, split, loss, parts, wf1=None):
    row = {"epoch": epoch, "split": split, "loss_total": loss}
    row.update({f"loss_{k}": v for k, v in parts.items() if k != "total"})
    if wf1 is not None:
        row["wf1_heuristic"] = wf1
    return row


def pretrain_stage1(model: SequenceModel, train: Sequence[SessionArrays], val: Sequence[SessionArrays],
                    cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Next-frame activity prediction; early stopping on validation loss."""
    if not train:
        raise ValueError("empty training corpus")
    model = model.copy()
    if not model.has_generative_head:
        model.add_generative_head()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    probe_batch = sample_batch(train, cfg, np.random.Generator(np.random.PCG64(cfg.seed + 7919)))
    val_batches = list(full_batches(val or train))
    opt = Adam(model.params, cfg.lr_stage1)
    names = model.backbone_names() + ["gen_W", "gen_b"]

    curve = []
    tr, tp = _mean_loss(model, [probe_batch], cfg, 1)
    va, vp = _mean_loss(model, val_batches, cfg, 1)
    curve += [_row(0, "train", tr, tp), _row(0, "val", va, vp)]
    best, best_epoch, best_params, stale = va, 0, model.copy(), 0
    for epoch in range(1, cfg.max_epochs_stage1 + 1):
        for step in range(cfg.steps_per_epoch):
            loss, _, grads = batch_loss(model, sample_batch(train, cfg, rng), cfg, 1)
            _check_finite(loss, 1, epoch, step)
            opt.step(model.params, {k: grads[k] for k in names}, cfg.clip_norm)
        tr, tp = _mean_loss(model, [probe_batch], cfg, 1)
        va, vp = _mean_loss(model, val_batches, cfg, 1)
        _check_finite(va, 1, epoch, -1)
        curve += [_row(epoch, "train", tr, tp), _row(epoch, "val", va, vp)]
        if va < best:
            best, best_epoch, best_params, stale = va, epoch, model.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    best_params.stage = "stage1"
    return TrainResult(best_params, curve, best_epoch, 1)


def heuristic_wf1(model: SequenceModel, val: Sequence[SessionArrays], policy=None) -> float:
    """Validation wF1 of the heuristic rules over both agent assignments."""
    from ..actions import derive_actions
    from ..evaluation import eval_agent_actions
    from ..fusion import default_rules
    from ..stream import decide_offline
    policy = policy or default_rules()
    truth, preds = {}, {}
    for i, s in enumerate(val):
        probs = sigmoid(model.forward(s.features)[0][0])
        for ag in CHANNELS:
            truth[(i, ag)] = derive_actions(s.timeline, ag)
            preds[(i, ag)] = decide_offline(probs, policy, ag)
    rep = eval_agent_actions(truth, preds)
    return rep.wf1 if rep.n_truth else 0.0


def finetune_stage2(model: SequenceModel, train: Sequence[SessionArrays], val: Sequence[SessionArrays],
                    cfg: TrainConfig = TrainConfig(), allow_no_pretrain: bool = False) -> TrainResult:
    """Signal-head training; early stopping on validation heuristic wF1."""
    if model.stage != "stage1" and not allow_no_pretrain:
        raise StageOrderError(f"stage 2 needs a stage-1 checkpoint (got stage {model.stage!r}); "
                              "pass allow_no_pretrain for the no-pretraining variant")
    if not train:
        raise ValueError("empty training corpus")
    model = model.copy()
    if cfg.aux_generative_weight > 0:
        if not model.has_generative_head:
            model.add_generative_head()
    else:
        model.drop_generative_head()
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    probe_batch = sample_batch(train, cfg, np.random.Generator(np.random.PCG64(cfg.seed + 7919)))
    val = list(val or train)
    val_batches = list(full_batches(val))
    opt = Adam(model.params, cfg.lr_stage2)
    freeze = cfg.stage2_freeze_backbone
    trainable = [k for k in model.params if not (freeze and k in model.backbone_names())]

    curve = []
    tr, tp = _mean_loss(model, [probe_batch], cfg, 2)
    va, vp = _mean_loss(model, val_batches, cfg, 2)
    wf1 = heuristic_wf1(model, val)
    curve += [_row(0, "train", tr, tp), _row(0, "val", va, vp, wf1)]
    best, best_epoch, best_model, stale = (wf1, -va), 0, model.copy(), 0
    for epoch in range(1, cfg.max_epochs_stage2 + 1):
        for step in range(cfg.steps_per_epoch):
            loss, _, grads = batch_loss(model, sample_batch(train, cfg, rng), cfg, 2, backbone=not freeze)
            _check_finite(loss, 2, epoch, step)
            opt.step(model.params, {k: grads[k] for k in trainable}, cfg.clip_norm)
        tr, tp = _mean_loss(model, [probe_batch], cfg, 2)
        va, vp = _mean_loss(model, val_batches, cfg, 2)
        _check_finite(va, 2, epoch, -1)
        wf1 = heuristic_wf1(model, val)
        curve += [_row(epoch, "train", tr, tp), _row(epoch, "val", va, vp, wf1)]
        if (wf1, -va) > best:
            best, best_epoch, best_model, stale = (wf1, -va), epoch, model.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    best_model.stage = "stage2"
    return TrainResult(best_model, curve, best_epoch, 2)


# -- gradient check ---------------------------------------------------------------------

@dataclass
class GradCheck:
    max_rel_error: float
    n_checked: int
    worst: list[tuple[str, tuple, float, float, float]]   # (name, index, analytic, numeric, rel)

    def assert_ok(self, tol: float = 1e-4) -> None:
        if not self.max_rel_error < tol:
            lines = [f"{n}{list(i)}: analytic={a:.3e} numeric={b:.3e} rel={r:.2e}" for n, i, a, b, r in self.worst]
            raise AssertionError(f"gradient check failed (max rel. error {self.max_rel_error:.2e} >= {tol:g}):\n"
                                 + "\n".join(lines))


def gradient_check(model: SequenceModel, batch, cfg: TrainConfig = TrainConfig(), stage: int = 2,
                   n_params: int = 100, eps: float = 1e-4, floor: float = 1e-6, seed: int = 0) -> GradCheck:
    """Central finite differences on ``n_params`` randomly chosen scalars.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  Requires a model
    with fewer than 10^4 parameters.
    """
    if model.n_parameters() >= 10_000:
        raise ValueError("gradient_check needs a model with fewer than 10^4 parameters")
    model = model.copy()
    _, _, grads = batch_loss(model, batch, cfg, stage)
    rng = np.random.Generator(np.random.PCG64(seed))
    flat = [(k, i) for k in sorted(model.params) for i in np.ndindex(model.params[k].shape)]
    pick = rng.choice(len(flat), size=min(n_params, len(flat)), replace=False)
    rows = []
    for j in pick:
        k, i = flat[j]
        p = model.params[k]
        keep = p[i]
        p[i] = keep + eps
        up = batch_loss(model, batch, cfg, stage, need_grads=False)[0]
        p[i] = keep - eps
        down = batch_loss(model, batch, cfg, stage, need_grads=False)[0]
        p[i] = keep
        num = (up - down) / (2 * eps)
        ana = float(grads[k][i])
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        rows.append((k, i, ana, num, rel))
    rows.sort(key=lambda r: -r[4])
    return GradCheck(rows[0][4] if rows else 0.0, len(rows), rows[:5])


# -- checkpoints ---------------------------------------------------------------------------

def checkpoint_dict(model: SequenceModel, train_cfg: TrainConfig | None = None,
                    feature_cfg: FeatureConfig = FeatureConfig(), extra: dict | None = None) -> dict:
    return {
        "format": "turntaking-checkpoint",
        "version": CHECKPOINT_VERSION,
        "stage": model.stage,
        "prng": PRNG_ID,
        "model_config": asdict(model.cfg),
        "feature_config": asdict(feature_cfg),
        "train_config": None if train_cfg is None else asdict(train_cfg),
        "params": [{"name": k, "shape": list(v.shape), "values": v.reshape(-1).tolist()}
                   for k, v in sorted(model.params.items())],
        **(extra or {}),
    }


def save_checkpoint(path, model: SequenceModel, train_cfg: TrainConfig | None = None,
                    feature_cfg: FeatureConfig = FeatureConfig(), extra: dict | None = None) -> None:
    from ..synth import _atomic_write_text
    from pathlib import Path
    _atomic_write_text(Path(path), json.dumps(checkpoint_dict(model, train_cfg, feature_cfg, extra)))


def load_checkpoint(path) -> tuple[SequenceModel, dict]:
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("format") != "turntaking-checkpoint" or obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    if obj.get("stage") not in STAGES:
        raise ValueError(f"{path}: unknown stage tag {obj.get('stage')!r}")
    cfg = ModelConfig(**obj["model_config"])
    model = SequenceModel(cfg, with_generative_head=False)
    model.params = {p["name"]: np.asarray(p["values"], dtype=np.float64).reshape(p["shape"]) for p in obj["params"]}
    model.stage = obj["stage"]
    return model, obj


# -- variants -------------------------------------------------------------------------------

VARIANTS = {
    "A": dict(pretrain=True),
    "B": dict(pretrain=True, aux_generative_weight=1.0),
    "C": dict(pretrain=False),
    "E": dict(pretrain=True, stage2_freeze_backbone=True),
    "D-analog": dict(pretrain=False, hidden=32),
}


def train_variant(variant: str, train: Sequence[SessionArrays], val: Sequence[SessionArrays],
                  cfg: TrainConfig = TrainConfig(), model_cfg: ModelConfig = ModelConfig(),
                  stage1: TrainResult | None = None):
    """Run one ablation variant end to end.  Returns (stage-1 result or None, stage-2 result).

    A precomputed stage-1 result can be shared between variants that pretrain.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    spec = VARIANTS[variant]
    mcfg = replace(model_cfg, hidden=spec["hidden"]) if "hidden" in spec else model_cfg
    cfg2 = replace(cfg, aux_generative_weight=spec.get("aux_generative_weight", cfg.aux_generative_weight),
                   stage2_freeze_backbone=spec.get("stage2_freeze_backbone", cfg.stage2_freeze_backbone))
    base = SequenceModel(mcfg)
    s1 = None
    if spec["pretrain"]:
        s1 = stage1 if stage1 is not None else pretrain_stage1(base, train, val, cfg)
        start = s1.model
    else:
        start = base
    s2 = finetune_stage2(start, train, val, cfg2, allow_no_pretrain=not spec["pretrain"])
    return s1, s2
