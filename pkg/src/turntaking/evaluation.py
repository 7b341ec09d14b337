"""Metric kernels and the four evaluation protocols.

* 5-class agent-action confusion / weighted F1 with anchor matching.
* Frame-level VAP-style binary tasks (shift/hold, short/long, shift
  prediction, backchannel prediction), all windows tied to one ``window_ms``.
* Word-level one-vs-rest AUC and pooled EER over C/B/T boundaries.
* Shift-vs-hold AUC as a function of time offset around user offsets.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .actions import ACTIONS, ANCHOR_OF, ActionConfig, WORD_CLASSES
from .labels import LabelConfig, bc_segment_mask
from .signals import SignalEstimates, column
from .timeline import CHANNELS, DEFAULT_RATE, ActivityTimeline, FrameRate, duration_to_frames, extract_segments, other

# Action a runtime agent ends up with when nothing was decided at an anchor.
FALLBACK_OF = {"offset": "CL", "overlap": "CT", "agent_onset": "CL"}


# -- confusion matrices and F1 ---------------------------------------------------

@dataclass
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: np.ndarray = None   # rows = truth, columns = prediction

    def __post_init__(self):
        k = len(self.classes)
        if self.counts is None:
            self.counts = np.zeros((k, k), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (k, k) or np.any(self.counts < 0):
            raise ValueError("counts must be a non-negative k x k matrix")

    def add(self, truth: str, pred: str, n: int = 1) -> None:
        self.counts[self.classes.index(truth), self.classes.index(pred)] += n

    def __add__(self, other_cm: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.classes != other_cm.classes:
            raise ValueError("class sets differ")
        return ConfusionMatrix(self.classes, self.counts + other_cm.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def per_class_f1(self) -> dict[str, float]:
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = 2 * tp + fp + fn
        f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
        return dict(zip(self.classes, map(float, f1)))

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}


def weighted_f1(cm: ConfusionMatrix) -> float:
    """Support-weighted mean of per-class F1."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    f1 = np.array(list(cm.per_class_f1().values()))
    sup = cm.support()
    return float((f1 * sup).sum() / sup.sum())


def binary_cm(truth: Sequence[bool], pred: Sequence[bool]) -> ConfusionMatrix:
    cm = ConfusionMatrix(("neg", "pos"))
    t = np.asarray(truth, dtype=bool).astype(int)
    p = np.asarray(pred, dtype=bool).astype(int)
    np.add.at(cm.counts, (t, p), 1)
    return cm


# -- ranking metrics -----------------------------------------------------------------

def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not y.any():
        raise ValueError("no positive examples")
    if y.all():
        raise ValueError("no negative examples")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC via average ranks (ties count one half)."""
    s, y = _split(scores, labels)
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    # average rank over each block of tied scores
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_s)) + 1]
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    P, N = int(y.sum()), int((~y).sum())
    return float((ranks[y].sum() - P * (P + 1) / 2.0) / (P * N))


def roc_auc_bruteforce(scores, labels) -> float:
    s, y = _split(scores, labels)
    pos, neg = s[y], s[~y]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def _rates_at(s, y, thresholds):
    """FAR (negatives scored >= t) and FRR (positives scored < t) per threshold."""
    pos, neg = np.sort(s[y]), np.sort(s[~y])
    far = 1.0 - np.searchsorted(neg, thresholds, side="left") / neg.size
    frr = np.searchsorted(pos, thresholds, side="left") / pos.size
    return far, frr


def _crossing(far, frr) -> float:
    d = far - frr                      # non-increasing in the threshold
    i = int(np.argmax(d <= 0))
    if d[i] == 0:
        return float(far[i])
    t = d[i - 1] / (d[i - 1] - d[i])
    return float(far[i - 1] + t * (far[i] - far[i - 1]))


def eer(scores, labels) -> float:
    """Equal error rate; higher score means more positive, no orientation flip.

    Operating points are taken at every distinct score plus +inf; if no
    threshold has FAR == FRR exactly, the crossing is interpolated linearly
    between the two adjacent thresholds.
    """
    s, y = _split(scores, labels)
    thresholds = np.r_[np.unique(s), np.inf]
    return _crossing(*_rates_at(s, y, thresholds))


def eer_bruteforce(scores, labels) -> float:
    """Exhaustive-threshold oracle: every score, every midpoint, and +-inf, counted directly."""
    s, y = _split(scores, labels)
    u = np.unique(s)
    cands = np.sort(np.r_[-np.inf, u, (u[:-1] + u[1:]) / 2.0, np.inf])
    far = np.array([np.mean(s[~y] >= t) for t in cands])
    frr = np.array([np.mean(s[y] < t) for t in cands])
    return _crossing(far, frr)


# -- agent actions ---------------------------------------------------------------------

@dataclass
class ActionReport:
    cm: ConfusionMatrix
    per_class_f1: dict
    wf1: float
    bc_prior: float
    chance_bc_f1: float
    n_truth: int
    n_matched: int
    window_frames: int

    def to_dict(self) -> dict:
        return {"wf1": self.wf1, "per_class_f1": self.per_class_f1, "confusion": self.cm.to_dict(),
                "bc_prior": self.bc_prior, "chance_bc_f1_uniform": self.chance_bc_f1,
                "n_truth": self.n_truth, "n_matched": self.n_matched, "window_frames": self.window_frames}


def _kind(x) -> str:
    return x.kind


def _anchor(x) -> str:
    return getattr(x, "anchor", None) or ANCHOR_OF[x.kind]


def match_stream(truth: Sequence, predictions: Sequence, window: int) -> list[tuple[object, object | None]]:
    """Pair each truth event with the nearest unused prediction of the same anchor type.

    Pairs are formed greedily in order of increasing distance (ties: earlier
    truth, then earlier prediction).  Unpaired truth gets ``None``.
    """
    cands = []
    for i, ev in enumerate(truth):
        for j, p in enumerate(predictions):
            dist = abs(p.frame - ev.frame)
            if dist <= window and _anchor(p) == _anchor(ev):
                cands.append((dist, ev.frame, p.frame, i, j))
    cands.sort()
    used_t, used_p, pairs = set(), set(), {}
    for _, _, _, i, j in cands:
        if i in used_t or j in used_p:
            continue
        used_t.add(i)
        used_p.add(j)
        pairs[i] = predictions[j]
    return [(ev, pairs.get(i)) for i, ev in enumerate(truth)]


def eval_agent_actions(truth, predictions, window_ms: float = 240, rate: FrameRate = DEFAULT_RATE) -> ActionReport:
    """Score predictions against truth events.

    ``truth`` and ``predictions`` are either two lists for one stream or two
    mappings stream-id -> list with the same keys.  Truth anchors left
    unmatched count as the fallback action of their anchor type.
    """
    window = duration_to_frames(window_ms, rate)
    if window < 1:
        raise ValueError("matching window must cover at least one frame")
    if isinstance(truth, Mapping):
        if set(truth) != set(predictions):
            raise ValueError("truth and predictions cover different streams")
        streams = [(truth[k], predictions[k]) for k in sorted(truth)]
    else:
        streams = [(truth, predictions)]
    cm = ConfusionMatrix(ACTIONS)
    matched = 0
    for t_list, p_list in streams:
        for ev, pred in match_stream(list(t_list), list(p_list), window):
            if pred is None:
                cm.add(ev.kind, FALLBACK_OF[ev.anchor])
            else:
                matched += 1
                cm.add(ev.kind, _kind(pred))
    n = cm.total
    prior = float(cm.support()[ACTIONS.index("BC")] / n) if n else 0.0
    chance = 2 * prior * 0.2 / (prior + 0.2) if prior > 0 else 0.0
    return ActionReport(cm, cm.per_class_f1(), weighted_f1(cm) if n else 0.0, prior, chance, n, matched, window)


# -- VAP-style frame-level tasks -----------------------------------------------------

@dataclass(frozen=True)
class VapConfig:
    window_ms: float = 1000
    bc_pred_lead_ms: float = 240
    threshold: float = 0.5


@dataclass
class VapEvents:
    """Per task: list of (score, label, meta)."""
    tasks: dict = field(default_factory=lambda: {k: [] for k in VAP_TASKS})


VAP_TASKS = ("S/H", "S/L", "S-P", "BC-P")


def _ratio(num, den, neutral=0.5):
    return num / den if den > 1e-3 else neutral


def vap_events(timeline: ActivityTimeline, estimates, cfg: VapConfig = VapConfig(),
               label_cfg: LabelConfig = LabelConfig()) -> dict[str, list[tuple[float, bool, dict]]]:
    est = estimates if isinstance(estimates, SignalEstimates) else SignalEstimates(estimates)
    if len(est) != len(timeline):
        raise ValueError("estimates and timeline differ in length")
    T = len(timeline)
    W = timeline.frames(cfg.window_ms)
    lead = timeline.frames(cfg.bc_pred_lead_ms)
    out = {k: [] for k in VAP_TASKS}
    segs = {ch: extract_segments(timeline, ch) for ch in CHANNELS}
    act = {ch: timeline.channel(ch).astype(bool) for ch in CHANNELS}
    is_bc = {ch: bc_segment_mask(segs[ch], T, timeline.frames(label_cfg.bc_max_dur_ms),
                                 timeline.frames(label_cfg.bc_isolation_ms)) for ch in CHANNELS}

    # Shift/Hold: mutual silences with one previous and one next speaker.
    either = act["A"] | act["B"]
    t = 0
    while t < T:
        if either[t]:
            t += 1
            continue
        g0 = t
        while t < T and not either[t]:
            t += 1
        g1 = t  # gap is [g0, g1)
        if g0 == 0 or g1 >= T:
            continue
        prev = [ch for ch in CHANNELS if act[ch][g0 - 1]]
        nxt = [ch for ch in CHANNELS if act[ch][g1]]
        if len(prev) != 1 or len(nxt) != 1:
            continue
        p, o = prev[0], other(prev[0])
        fo = est.get("fvad0", o)[g1 - 1]
        fp = est.get("fvad0", p)[g1 - 1]
        out["S/H"].append((_ratio(fo, fo + fp), nxt[0] != p, {"frame": g1 - 1, "prev": p, "next": nxt[0]}))

    for ch in CHANNELS:
        ss = segs[ch]
        # Short/Long at onsets after >= W same-channel silence.
        for i, seg in enumerate(ss):
            if seg.offset_frame >= T:
                continue
            gap = seg.onset_frame - ss[i - 1].offset_frame if i > 0 else seg.onset_frame + W
            if gap < W:
                continue
            score = 1.0 - est.get("bc", ch)[seg.onset_frame]
            out["S/L"].append((score, seg.duration >= W, {"frame": seg.onset_frame, "channel": ch}))

        # Shift prediction over the last W frames of speech before an offset.
        oth = segs[other(ch)]
        oth_floor = [s for s, b in zip(oth, is_bc[other(ch)]) if not b]
        eot, hold = est.get("eot", ch), est.get("hold", ch)
        for i, seg in enumerate(ss):
            o = seg.offset_frame
            if o >= T or is_bc[ch][i] or seg.duration < W:
                continue
            resume = ss[i + 1].onset_frame if i + 1 < len(ss) else None
            taken = next((s.onset_frame for s in oth_floor if s.onset_frame >= o), None)
            overlap = any(s.onset_frame < o < s.offset_frame for s in oth)
            if overlap:
                continue
            if taken is not None and taken - o < W and (resume is None or taken <= resume):
                label = True
            elif resume is not None and resume - o < W and (taken is None or resume < taken):
                label = False
            else:
                continue
            region = range(o - W, o)
            score = float(np.mean([_ratio(eot[k], eot[k] + hold[k]) for k in region]))
            out["S-P"].append((score, label, {"frame": o - 1, "channel": ch}))

        # Backchannel prediction: the lead frames before a BC onset during the other's speech,
        # against the same-length stretch at the middle of the other's long segments.
        bc = est.get("bc", ch)
        for i, seg in enumerate(ss):
            b = seg.onset_frame
            if is_bc[ch][i] and act[other(ch)][b] and b >= lead:
                out["BC-P"].append((float(bc[b - lead:b].mean()), True, {"frame": b, "channel": ch}))
        for s in oth:
            if s.duration < 2 * W or s.offset_frame >= T:
                continue
            m = (s.onset_frame + s.offset_frame) // 2
            lo, hi = max(0, m - W), min(T, m + W)
            if act[ch][lo:hi].any():
                continue
            out["BC-P"].append((float(bc[m - lead:m].mean()), False, {"frame": m, "channel": ch}))
    return out


def eval_vap_protocol(sessions: Sequence[tuple[ActivityTimeline, object]], cfg: VapConfig = VapConfig(),
                      label_cfg: LabelConfig = LabelConfig()) -> dict:
    """wF1 per task over (timeline, estimates) pairs, thresholding scores at ``cfg.threshold``."""
    pooled = {k: [] for k in VAP_TASKS}
    for tl, est in sessions:
        for k, evs in vap_events(tl, est, cfg, label_cfg).items():
            pooled[k].extend(evs)
    report = {"config": {"window_ms": cfg.window_ms, "bc_pred_lead_ms": cfg.bc_pred_lead_ms,
                         "threshold": cfg.threshold}}
    for k, evs in pooled.items():
        if not evs:
            report[k] = {"wf1": None, "n": 0}
            continue
        scores = np.array([e[0] for e in evs])
        labels = np.array([e[1] for e in evs])
        cm = binary_cm(labels, scores > cfg.threshold)
        report[k] = {"wf1": weighted_f1(cm), "n": len(evs), "n_pos": int(labels.sum()),
                     "majority_baseline": float(max(labels.mean(), 1 - labels.mean()))}
    return report


# -- word level --------------------------------------------------------------------

def eval_word_level(truth: Sequence[str], scores) -> dict:
    """One-vs-rest AUC per class, their unweighted mean, and pooled one-vs-rest EER."""
    truth = np.asarray(list(truth))
    S = np.asarray(scores, dtype=np.float64)
    if S.shape != (truth.size, len(WORD_CLASSES)):
        raise ValueError("need one C/B/T score triple per boundary")
    missing = [c for c in WORD_CLASSES if not (truth == c).any()]
    if missing:
        raise ValueError(f"word-level truth lacks class(es) {missing}")
    out = {}
    for k, c in enumerate(WORD_CLASSES):
        out[f"AUC({c})"] = roc_auc(S[:, k], truth == c)
    out["Avg"] = float(np.mean([out[f"AUC({c})"] for c in WORD_CLASSES]))
    onehot = np.stack([truth == c for c in WORD_CLASSES], axis=1)
    out["EER"] = eer(S.reshape(-1), onehot.reshape(-1))
    out["n"] = int(truth.size)
    out["counts"] = {c: int((truth == c).sum()) for c in WORD_CLASSES}
    return out


# -- anticipation ------------------------------------------------------------------------

def anticipation_report(traces: Mapping[int, Sequence[tuple[float, int]]]) -> list[dict]:
    """Rows ``{delta_ms, auc, n}`` in ascending delta order."""
    if not traces:
        raise ValueError("no anticipation traces")
    rows = []
    for delta in sorted(traces):
        pairs = traces[delta]
        s = [p[0] for p in pairs]
        y = [p[1] for p in pairs]
        rows.append({"delta_ms": delta, "auc": roc_auc(s, y), "n": len(pairs)})
    return rows


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in columns})
    return buf.getvalue()


def anticipation_csv(rows: Sequence[dict]) -> str:
    return rows_to_csv(rows, ["delta_ms", "auc", "n"])


def report_json(obj) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))
    return json.dumps(obj, indent=2, sort_keys=True, default=default)
