import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turntaking.actions import ACTIONS, derive_actions
from turntaking.evaluation import ConfusionMatrix, weighted_f1
from turntaking.fusion import (ABSENT_BIAS, Condition, HeuristicRules, LRProbe, anchor_features, decision_frame,
                               default_rules, heuristic_decide, lr_fit, lr_objective, lr_predict, role_index,
                               softmax)
from turntaking.labels import derive_all
from turntaking.signals import role_order

def max_rel_error(f, x, grad, h=1e-3):
    """Five-point central differences; error O(h^4) plus roundoff ~1e-13."""
    worst = 0.0
    for idx in np.ndindex(x.shape):
        def at(k):
            y = x.copy()
            y[idx] += k * h
            return f(y)
        num = (-at(2) + 8 * at(1) - 8 * at(-1) + at(-2)) / (12 * h)
        worst = max(worst, abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-8))
    return worst


unit_rows = st.lists(st.floats(0, 1), min_size=18, max_size=18).map(np.array)


def row(**kw):
    r = np.zeros(18)
    for key, v in kw.items():
        sig, role = key.rsplit("_", 1)
        r[role_index(sig, role)] = v
    return r


# -- heuristics -------------------------------------------------------------------

def test_paper_rule():
    assert heuristic_decide(row(eot_u=0.9, bot_a=0.8), anchor="offset") == ("ST", "st_eot_bot")


def test_all_zero_falls_back():
    assert heuristic_decide(np.zeros(18)) == ("CL", "cl_eot")
    assert heuristic_decide(np.zeros(18), HeuristicRules(())) == ("CL", "fallback")
    assert heuristic_decide(np.zeros(18), anchor="agent_onset") == ("CL", "fallback")


def test_rule_order_trace():
    action, rule = heuristic_decide(row(eot_u=0.9, bot_a=0.2), anchor="offset")
    assert rule != "st_eot_bot" and rule == "st_eot" and action == "ST"


def test_anchor_gating():
    r = row(bot_u=0.9, bc_a=0.9, vad_u=0.9)
    assert heuristic_decide(r, anchor="overlap")[0] == "SL"
    assert heuristic_decide(r, anchor="agent_onset")[0] == "BC"
    assert heuristic_decide(row(bot_u=0.1), anchor="overlap")[0] == "CT"


def test_rules_json_round_trip():
    rules = default_rules()
    back = HeuristicRules.from_json(rules.to_json())
    assert back == rules
    obj = json.loads(rules.to_json())
    assert {"signal", "role", "op", "threshold"} <= set(obj["rules"][0]["conditions"][0])


def test_condition_validation():
    with pytest.raises(ValueError):
        Condition("eot", "u", ">=", 0.5)
    with pytest.raises(ValueError):
        Condition("eot", "u", ">", 1.5)
    with pytest.raises(ValueError):
        Condition("eot", "x", ">", 0.5)


@settings(max_examples=300)
@given(unit_rows, st.sampled_from(["offset", "overlap", "agent_onset"]), st.integers(0, 17), st.floats(0, 1))
def test_unreferenced_signals_do_not_matter(r, anchor, col, value):
    """Perturbing a signal no rule up to and including the match looks at leaves the decision alone."""
    rules = default_rules()
    action, rid = rules.decide(r, anchor)
    if rid == "fallback":
        return
    seen = set()
    for rule in rules.rules:
        if anchor in rule.anchors:
            seen |= {role_index(s, ro) for s, ro in rule.signals()}
        if rule.rule_id == rid:
            break
    if col in seen:
        return
    r2 = r.copy()
    r2[col] = value
    assert rules.decide(r2, anchor) == (action, rid)


@settings(max_examples=200)
@given(unit_rows)
def test_heuristic_deterministic(r):
    assert heuristic_decide(r) == heuristic_decide(r.copy())


# -- softmax / LR -----------------------------------------------------------------

@settings(max_examples=200)
@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(z, c):
    z = np.array([z])
    p = softmax(z)
    assert abs(p.sum() - 1) < 1e-9
    assert np.allclose(softmax(z + c), p, atol=1e-12)


def test_zero_weights_uniform():
    probe = LRProbe(np.zeros((18, 5)), np.zeros(5))
    assert np.allclose(lr_predict(probe, np.random.default_rng(0).random((4, 18))), 0.2)


def test_closed_form_two_feature():
    W = np.array([[1.0, -1.0, 0, 0, 0], [0.5, 2.0, 0, 0, 0]])
    b = np.array([0.0, 0.1, 0, 0, 0])
    x = np.array([0.3, 0.7])
    z = np.array([0.3 + 0.35, -0.3 + 1.4 + 0.1, 0, 0, 0])
    expect = np.exp(z) / np.exp(z).sum()
    assert np.allclose(LRProbe(W, b, feature_names=("x0", "x1")).predict_proba(x)[0], expect, atol=1e-15)


def test_separable_two_class():
    rng = np.random.default_rng(0)
    X = np.r_[rng.normal(-2, 0.3, (20, 2)), rng.normal(2, 0.3, (20, 2))]
    y = ["ST"] * 20 + ["CL"] * 20
    probe = lr_fit(X, y, l2=1e-4)
    pred = [probe.classes[i] for i in np.argmax(lr_predict(probe, X), axis=1)]
    assert pred == y
    assert probe.diagnostics["monotone"]
    assert np.all(np.diff(probe._history) <= 0)
    # absent classes are pinned
    for c in ("SL", "CT", "BC"):
        k = probe.classes.index(c)
        assert probe.bias[k] == ABSENT_BIAS and np.all(probe.weights[:, k] == 0)


def test_identical_rows_uniform_labels():
    X = np.ones((50, 18)) * 0.3
    y = [ACTIONS[i % 5] for i in range(50)]
    probe = lr_fit(X, y, l2=1e-2)
    assert np.max(np.abs(lr_predict(probe, X[:1]) - 0.2)) <= 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([None, "balanced"]))
def test_lr_gradient_finite_differences(seed, cw):
    rng = np.random.default_rng(seed)
    n, d, K = 12, 4, 5
    X = rng.normal(size=(n, d))
    Y = np.eye(K)[rng.integers(0, K, n)]
    sw = None if cw is None else rng.random(n) + 0.5
    W, b = rng.normal(size=(d, K)), rng.normal(size=K)
    _, gW, gb = lr_objective(W, b, X, Y, 0.1, sw)
    worst = max(max_rel_error(lambda V: lr_objective(V, b, X, Y, 0.1, sw)[0], W, gW),
                max_rel_error(lambda v: lr_objective(W, v, X, Y, 0.1, sw)[0], b, gb))
    assert worst < 1e-6


def test_lr_errors_and_single_class():
    X = np.zeros((6, 18))
    with pytest.raises(ValueError):
        lr_fit(X[:4], ["ST"] * 4)
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        lr_fit(bad, ["ST"] * 6)
    with pytest.raises(ValueError):
        lr_fit(X, ["XX"] * 6)
    with pytest.warns(RuntimeWarning):
        probe = lr_fit(X, ["BC"] * 6)
    assert probe.decide(X[0]) == ("BC", "lr")


def test_probe_json_round_trip():
    rng = np.random.default_rng(2)
    probe = lr_fit(rng.random((30, 18)), [ACTIONS[i % 5] for i in range(30)])
    back = LRProbe.from_json(probe.to_json())
    assert np.array_equal(back.weights, probe.weights) and back.feature_names == probe.feature_names
    assert "feature_spec" in json.loads(probe.to_json())


def test_restrict_to_anchor():
    W = np.zeros((18, 5))
    b = np.array([0, 0, 0, 0, 5.0])          # BC dominates everywhere
    probe = LRProbe(W, b)
    assert probe.decide(np.zeros(18), "offset")[0] in ("ST", "CL")
    assert probe.decide(np.zeros(18))[0] == "BC"


# -- anchors ----------------------------------------------------------------------

def test_anchor_features():
    est = np.arange(5 * 18, dtype=float).reshape(5, 18)
    assert np.array_equal(anchor_features(est, [2], "B")[0], est[2])   # user A first already
    swapped = anchor_features(est, [2], "A")[0]
    assert np.array_equal(swapped[:9], est[2, 9:]) and np.array_equal(swapped[9:], est[2, :9])
    with pytest.raises(IndexError):
        anchor_features(est, [5])
    assert anchor_features(est, []).shape == (0, 18)


def test_lr_on_oracle_estimates(small_corpus):
    X, y = [], []
    for s in small_corpus:
        est = derive_all(s.timeline).matrix()
        for ag in "AB":
            ev = derive_actions(s.timeline, ag)
            X.append(anchor_features(est, [decision_frame(e, len(est)) for e in ev], ag))
            y += [e.kind for e in ev]
    X = np.concatenate(X)
    probe = lr_fit(X, y)
    cm = ConfusionMatrix(ACTIONS)
    for t, p in zip(y, np.argmax(lr_predict(probe, X), axis=1)):
        cm.add(t, ACTIONS[p])
    assert weighted_f1(cm) >= 0.95
    assert probe.diagnostics["monotone"]
