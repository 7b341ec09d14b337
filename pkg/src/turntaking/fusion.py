"""Turning per-frame signal estimates into agent actions.

Two policies share one interface (``decide(row, anchor)``):

* :class:`HeuristicRules` -- ordered threshold conjunctions, first match wins.
* :class:`LRProbe` -- multinomial logistic regression over the 18 signals,
  fitted by full-batch gradient descent with backtracking line search.

Feature rows are role-ordered: the user's 9 signals, then the agent's 9.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .actions import ACTIONS, ANCHOR_OF, ANCHOR_TYPES, WORD_CLASSES
from .signals import N_PER_CHANNEL, SIGNAL_NAMES, SignalEstimates, role_column_names, role_order

ROLE_COLUMNS = role_column_names()


def role_index(signal: str, role: str) -> int:
    if role not in ("u", "a"):
        raise ValueError(f"role must be 'u' or 'a', got {role!r}")
    return (0 if role == "u" else N_PER_CHANNEL) + SIGNAL_NAMES.index(signal)


# -- heuristics -----------------------------------------------------------------

@dataclass(frozen=True)
class Condition:
    signal: str
    role: str
    op: str
    threshold: float

    def __post_init__(self):
        if self.op not in (">", "<"):
            raise ValueError("comparator must be '>' or '<'")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("thresholds must lie in [0, 1]")
        role_index(self.signal, self.role)

    def holds(self, row) -> bool:
        v = row[role_index(self.signal, self.role)]
        return v > self.threshold if self.op == ">" else v < self.threshold

    def __str__(self):
        return f"{self.signal.upper()}_{self.role}{self.op}{self.threshold:g}"


@dataclass(frozen=True)
class Rule:
    action: str
    conditions: tuple[Condition, ...]
    anchors: tuple[str, ...] = ANCHOR_TYPES
    rule_id: str = ""

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if not set(self.anchors) <= set(ANCHOR_TYPES):
            raise ValueError(f"unknown anchor types in {self.anchors}")

    def matches(self, row, anchor: str | None = None) -> bool:
        if anchor is not None and anchor not in self.anchors:
            return False
        return all(c.holds(row) for c in self.conditions)

    def signals(self) -> set[tuple[str, str]]:
        return {(c.signal, c.role) for c in self.conditions}


def _r(action, conds, anchors, rule_id):
    return Rule(action, tuple(Condition(*c) for c in conds), tuple(anchors), rule_id)


@dataclass(frozen=True)
class HeuristicRules:
    rules: tuple[Rule, ...]
    fallback: str = "CL"
    policy_id: str = "heuristic"

    def decide(self, row, anchor: str | None = None) -> tuple[str, str]:
        """(action, id of the matching rule or ``"fallback"``)."""
        for rule in self.rules:
            if rule.matches(row, anchor):
                return rule.action, rule.rule_id
        return self.fallback, "fallback"

    def st_score(self, row) -> float:
        return float(row[role_index("eot", "u")])

    def scores(self, row) -> dict:
        return {"eot_u": float(row[role_index("eot", "u")]), "bot_a": float(row[role_index("bot", "a")]),
                "bc_a": float(row[role_index("bc", "a")])}

    def to_json(self) -> str:
        return json.dumps({
            "fallback": self.fallback,
            "rules": [{"action": r.action, "priority": i, "rule_id": r.rule_id, "anchors": list(r.anchors),
                       "conditions": [asdict(c) for c in r.conditions]} for i, r in enumerate(self.rules)],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "HeuristicRules":
        obj = json.loads(text)
        rules = sorted(obj["rules"], key=lambda r: r.get("priority", 0))
        return cls(tuple(Rule(r["action"], tuple(Condition(**c) for c in r["conditions"]),
                              tuple(r.get("anchors", ANCHOR_TYPES)), r.get("rule_id", f"r{i}"))
                         for i, r in enumerate(rules)), obj.get("fallback", "CL"))


def default_rules() -> HeuristicRules:
    return HeuristicRules((
        _r("ST", [("eot", "u", ">", 0.5), ("bot", "a", ">", 0.5)], ["offset"], "st_eot_bot"),
        _r("ST", [("eot", "u", ">", 0.5)], ["offset"], "st_eot"),
        _r("CL", [("eot", "u", "<", 0.5)], ["offset"], "cl_eot"),
        _r("SL", [("bot", "u", ">", 0.5)], ["overlap"], "sl_bot"),
        _r("CT", [("bot", "u", "<", 0.5)], ["overlap"], "ct_bot"),
        _r("BC", [("bc", "a", ">", 0.5), ("vad", "u", ">", 0.5)], ["agent_onset"], "bc"),
    ))


def heuristic_decide(row, rules: HeuristicRules | None = None, anchor: str | None = None) -> tuple[str, str]:
    return (rules or default_rules()).decide(np.asarray(row, dtype=np.float64), anchor)


# -- logistic regression probe ---------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


ABSENT_BIAS = -20.0


@dataclass
class LRProbe:
    weights: np.ndarray            # (n_features, n_classes)
    bias: np.ndarray               # (n_classes,)
    classes: tuple[str, ...] = ACTIONS
    feature_names: tuple[str, ...] = tuple(ROLE_COLUMNS)
    l2: float = 1e-3
    fitted: bool = False
    restrict_to_anchor: bool = True
    diagnostics: dict = field(default_factory=dict)
    policy_id: str = "lr"

    def predict_proba(self, features) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return softmax(X @ self.weights + self.bias)

    def decide(self, row, anchor: str | None = None) -> tuple[str, str]:
        probs = self.predict_proba(row)[0]
        if anchor is not None and self.restrict_to_anchor:
            allowed = [i for i, c in enumerate(self.classes) if ANCHOR_OF.get(c) == anchor]
            if allowed:
                return self.classes[max(allowed, key=lambda i: probs[i])], "lr"
        return self.classes[int(np.argmax(probs))], "lr"

    def st_score(self, row) -> float:
        return float(self.predict_proba(row)[0, self.classes.index("ST")])

    def scores(self, row) -> dict:
        return dict(zip(self.classes, map(float, self.predict_proba(row)[0])))

    def to_json(self) -> str:
        return json.dumps({
            "feature_spec": list(self.feature_names),
            "classes": list(self.classes),
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "l2": self.l2,
            "fitted": self.fitted,
            "restrict_to_anchor": self.restrict_to_anchor,
            "diagnostics": self.diagnostics,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LRProbe":
        o = json.loads(text)
        return cls(np.asarray(o["weights"], dtype=np.float64), np.asarray(o["bias"], dtype=np.float64),
                   tuple(o["classes"]), tuple(o["feature_spec"]), o["l2"], o["fitted"],
                   o.get("restrict_to_anchor", True), o.get("diagnostics", {}))


def lr_objective(W, b, X, Y, l2, sample_weight=None):
    """Mean (weighted) multinomial cross-entropy + (l2/2)||W||^2 and its gradients."""
    n = X.shape[0]
    sw = np.ones(n) if sample_weight is None else sample_weight
    logits = X @ W + b
    logits = logits - logits.max(axis=1, keepdims=True)
    logZ = np.log(np.exp(logits).sum(axis=1))
    logp = logits - logZ[:, None]
    loss = -(sw * (Y * logp).sum(axis=1)).sum() / sw.sum() + 0.5 * l2 * float((W * W).sum())
    G = (np.exp(logp) - Y) * (sw / sw.sum())[:, None]
    return loss, X.T @ G + l2 * W, G.sum(axis=0)


def lr_fit(features, labels: Sequence[str], l2: float = 1e-3, classes: Sequence[str] = ACTIONS,
           max_iter: int = 5000, tol: float = 1e-6, class_weight: str | None = None,
           feature_names: Sequence[str] | None = None) -> LRProbe:
    """Fit a multinomial LR by full-batch gradient descent with Armijo backtracking.

    Stops when the gradient norm drops below ``tol`` or after ``max_iter``
    iterations.  Classes absent from ``labels`` keep zero weights and a large
    negative bias.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D array")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    labels = list(labels)
    if X.shape[0] != len(labels):
        raise ValueError("features and labels differ in length")
    if X.shape[0] < 5:
        raise ValueError("need at least 5 samples to fit the probe")
    classes = tuple(classes)
    unknown = set(labels) - set(classes)
    if unknown:
        raise ValueError(f"labels outside the class set: {sorted(unknown)}")
    names = tuple(feature_names) if feature_names is not None else (
        tuple(ROLE_COLUMNS) if X.shape[1] == len(ROLE_COLUMNS) else tuple(f"x{i}" for i in range(X.shape[1])))
    d, K = X.shape[1], len(classes)
    idx = np.array([classes.index(c) for c in labels])
    present = np.zeros(K, dtype=bool)
    present[np.unique(idx)] = True

    if present.sum() == 1:
        warnings.warn("lr_fit saw a single class; the probe will always predict it", RuntimeWarning)
        b = np.where(present, 0.0, ABSENT_BIAS)
        return LRProbe(np.zeros((d, K)), b, classes, names, l2, True,
                       diagnostics={"iterations": 0, "loss": 0.0, "grad_norm": 0.0, "single_class": True})

    Y = np.zeros((X.shape[0], K))
    Y[np.arange(X.shape[0]), idx] = 1.0
    sw = None
    if class_weight == "balanced":
        counts = np.bincount(idx, minlength=K).astype(np.float64)
        sw = (X.shape[0] / (present.sum() * counts))[idx]
    elif class_weight is not None:
        raise ValueError("class_weight must be None or 'balanced'")

    live = present
    W = np.zeros((d, K))
    b = np.where(live, 0.0, ABSENT_BIAS)

    def obj(W, b):
        loss, gW, gb = lr_objective(W, b, X, Y, l2, sw)
        gW[:, ~live] = 0.0
        gb[~live] = 0.0
        return loss, gW, gb

    loss, gW, gb = obj(W, b)
    history = [loss]
    step = 1.0
    it = 0
    gnorm = float(np.sqrt((gW * gW).sum() + (gb * gb).sum()))
    while it < max_iter and gnorm >= tol:
        g2 = gnorm * gnorm
        step = min(step * 2.0, 1e4)
        while True:
            W_new, b_new = W - step * gW, b - step * gb
            new_loss, ngW, ngb = obj(W_new, b_new)
            if new_loss <= loss - 1e-4 * step * g2 or step < 1e-12:
                break
            step *= 0.5
        if new_loss > loss:
            break  # no descent possible at machine precision
        W, b, loss, gW, gb = W_new, b_new, new_loss, ngW, ngb
        history.append(loss)
        gnorm = float(np.sqrt((gW * gW).sum() + (gb * gb).sum()))
        it += 1
    diag = {"iterations": it, "loss": float(loss), "grad_norm": gnorm, "converged": gnorm < tol,
            "monotone": bool(np.all(np.diff(history) <= 0)), "loss_history_tail": [float(x) for x in history[-5:]]}
    probe = LRProbe(W, b, classes, names, l2, True, diagnostics=diag)
    probe._history = history
    return probe


def lr_predict(probe: LRProbe, features) -> np.ndarray:
    return probe.predict_proba(features)


# -- anchors and feature rows ----------------------------------------------------

def anchor_features(estimates, frames: Sequence[int], agent_channel: str = "B") -> np.ndarray:
    """One role-ordered row of the 18 signals per anchor frame."""
    values = estimates.values if isinstance(estimates, SignalEstimates) else np.asarray(estimates, dtype=np.float64)
    frames = np.asarray(list(frames), dtype=int)
    T = values.shape[0]
    if frames.size and (frames.min() < 0 or frames.max() >= T):
        raise IndexError("anchor frame outside the session")
    return values[frames][:, role_order(agent_channel)] if frames.size else np.zeros((0, values.shape[1]))


def decision_frame(event, length: int) -> int:
    """Frame whose estimates a runtime policy sees for this event.

    Offsets are only detectable one frame after the last active frame.
    """
    f = event.frame + 1 if event.anchor == "offset" else event.frame
    return min(f, length - 1)


# -- word-level scoring -----------------------------------------------------------

@dataclass(frozen=True)
class WordScoring:
    """Soft C/B/T scores at word boundaries.

    ``heuristic`` treats EOT of the speaker and BC of the listener as evidence
    logits ``(value - threshold) / temperature`` against a zero logit for C.
    """
    method: str = "heuristic"
    threshold: float = 0.9
    temperature: float = 0.05


def word_scores(estimates, boundaries: Sequence[tuple[str, int]], scoring: WordScoring = WordScoring(),
                probe: LRProbe | None = None) -> np.ndarray:
    """(n, 3) scores per boundary in WORD_CLASSES order (C, B, T)."""
    values = estimates.values if isinstance(estimates, SignalEstimates) else np.asarray(estimates)
    out = np.zeros((len(boundaries), 3))
    for i, (ch, frame) in enumerate(boundaries):
        listener = "B" if ch == "A" else "A"
        row = values[frame][role_order(listener)]  # speaker is the "user"
        eot = row[role_index("eot", "u")]
        bc = row[role_index("bc", "a")]
        if scoring.method == "heuristic":
            z = np.array([0.0, (bc - scoring.threshold), (eot - scoring.threshold)]) / scoring.temperature
            z[0] = 0.0
            out[i] = softmax(z)
        elif scoring.method == "eot_only":
            out[i] = (1.0 - eot, 1.0 - eot, eot)
        elif scoring.method == "lr":
            if probe is None:
                raise ValueError("lr scoring needs a fitted probe")
            p = probe.predict_proba(row)[0]
            out[i] = [p[probe.classes.index(c)] for c in WORD_CLASSES]
        else:
            raise ValueError(f"unknown word scoring method {scoring.method!r}")
    return out


def word_features(estimates, boundaries: Sequence[tuple[str, int]]) -> np.ndarray:
    values = estimates.values if isinstance(estimates, SignalEstimates) else np.asarray(estimates)
    return np.stack([values[f][role_order("B" if ch == "A" else "A")] for ch, f in boundaries]) \
        if boundaries else np.zeros((0, values.shape[1]))
