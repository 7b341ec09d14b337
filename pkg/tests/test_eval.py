import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turntaking.actions import ACTIONS, ActionEvent, derive_actions, derive_word_level_classes
from turntaking.evaluation import (ConfusionMatrix, VapConfig, anticipation_csv, anticipation_report, binary_cm, eer,
                                   eer_bruteforce, eval_agent_actions, eval_vap_protocol, eval_word_level,
                                   roc_auc, roc_auc_bruteforce, weighted_f1)
from turntaking.fusion import default_rules, word_scores
from turntaking.labels import derive_all
from turntaking.stream import Decision, anticipation_trace, decide_offline

scored = st.lists(st.tuples(st.integers(0, 6).map(lambda v: v / 6), st.booleans()), min_size=2, max_size=40) \
    .filter(lambda xs: any(y for _, y in xs) and not all(y for _, y in xs))


# -- F1 ---------------------------------------------------------------------------

def test_weighted_f1_examples():
    cm = ConfusionMatrix(("a", "b", "c"), np.diag([3, 4, 5]))
    assert weighted_f1(cm) == 1.0
    cm = binary_cm([1, 1, 1, 0, 0, 0, 0, 0, 0, 0], [1, 1, 0, 1, 0, 0, 0, 0, 0, 0])
    f1 = cm.per_class_f1()
    assert f1["pos"] == pytest.approx(2 / 3) and f1["neg"] == pytest.approx(6 / 7)
    assert weighted_f1(cm) == pytest.approx(0.8, abs=1e-12)
    cm = ConfusionMatrix(("a", "b", "c"), [[2, 0, 0], [0, 3, 0], [0, 0, 0]])
    assert cm.support()[2] == 0 and weighted_f1(cm) == 1.0
    with pytest.raises(ValueError):
        weighted_f1(ConfusionMatrix(("a", "b")))


# -- ranking metrics ----------------------------------------------------------------

def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.5] * 4, [1, 1, 0, 0]) == 0.5
    assert roc_auc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=500)
@given(scored)
def test_auc_matches_pair_counting(xs):
    s, y = zip(*xs)
    assert roc_auc(s, y) == roc_auc_bruteforce(s, y)


def test_eer_examples():
    assert eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 0.0
    assert eer([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0]) == 1.0
    # threshold-swept crossing; the convex-hull reading would give 0.25 here
    s, y = [0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]
    assert eer(s, y) == 0.5 == eer_bruteforce(s, y)


@settings(max_examples=500)
@given(scored)
def test_eer_matches_exhaustive_thresholds(xs):
    s, y = zip(*xs)
    assert abs(eer(s, y) - eer_bruteforce(s, y)) <= 1e-9


# -- agent actions ------------------------------------------------------------------

def test_oracle_decisions_score_one(small_corpus):
    truth = {(s.seed, ag): derive_actions(s.timeline, ag) for s in small_corpus for ag in "AB"}
    planted = {(s.seed, ag): [e for e in s.log.events if e.agent_channel == ag] for s in small_corpus for ag in "AB"}
    rep = eval_agent_actions(truth, planted)
    assert rep.wf1 == 1.0 and rep.n_matched == rep.n_truth


def test_empty_decisions_all_fallback():
    truth = [ActionEvent(10, "ST", "B"), ActionEvent(40, "CL", "B"), ActionEvent(70, "SL", "B")]
    rep = eval_agent_actions(truth, [])
    assert rep.n_matched == 0
    assert rep.cm.counts[0, 1] == 1 and rep.cm.counts[1, 1] == 1 and rep.cm.counts[2, 3] == 1
    assert rep.per_class_f1["CL"] == pytest.approx(2 / 3)


def test_matching_window_and_anchor_type():
    truth = [ActionEvent(10, "ST", "B")]
    assert eval_agent_actions(truth, [ActionEvent(13, "ST", "B")]).n_matched == 1
    assert eval_agent_actions(truth, [ActionEvent(14, "ST", "B")]).n_matched == 0
    assert eval_agent_actions(truth, [ActionEvent(10, "SL", "B")]).n_matched == 0
    with pytest.raises(ValueError):
        eval_agent_actions(truth, [], window_ms=20)


def test_chance_bc_context(small_corpus):
    rng = np.random.default_rng(0)
    truth, rand = {}, {}
    for s in small_corpus:
        for ag in "AB":
            ev = derive_actions(s.timeline, ag)
            truth[(s.seed, ag)] = ev
            rand[(s.seed, ag)] = [Decision(str(rng.choice(ACTIONS)), 0, e.frame, e.anchor, (), "random", "random")
                                  for e in ev]
    rep = eval_agent_actions(truth, rand)
    assert rep.chance_bc_f1 == pytest.approx(2 * 0.2 * rep.bc_prior / (0.2 + rep.bc_prior))


# -- VAP tasks ---------------------------------------------------------------------

def test_vap_oracle(small_corpus):
    rep = eval_vap_protocol([(s.timeline, derive_all(s.timeline).matrix()) for s in small_corpus])
    for task in ("S/H", "S/L", "S-P", "BC-P"):
        assert rep[task]["n"] > 0 and rep[task]["wf1"] >= 0.99
    assert rep["config"]["window_ms"] == 1000


def test_vap_constant_scores(small_corpus):
    rep = eval_vap_protocol([(s.timeline, np.full((len(s.timeline), 18), 0.5)) for s in small_corpus[:4]])
    assert rep["S/H"]["wf1"] < 0.99


# -- word level --------------------------------------------------------------------

def test_word_level_oracle_and_permuted():
    from turntaking.synth import GeneratorConfig, generate_corpus
    truth, S, perm = [], [], []
    rng = np.random.default_rng(0)
    for s in generate_corpus(GeneratorConfig(seed=900), 8):
        est = derive_all(s.timeline).matrix()
        truth += derive_word_level_classes(s.timeline, s.words)
        S.append(word_scores(est, s.words))
    S = np.concatenate(S)
    rep = eval_word_level(truth, S)
    assert rep["Avg"] == 1.0 and rep["EER"] == 0.0
    assert rep["n"] >= 500
    rep = eval_word_level(truth, S[rng.permutation(len(S))])
    assert abs(rep["Avg"] - 0.5) <= 0.05


def test_word_level_hand_case():
    truth = ["C", "C", "B", "B", "T", "T"]
    S = np.array([[.7, .2, .1], [.4, .5, .1], [.2, .6, .2], [.5, .3, .2], [.1, .1, .8], [.3, .1, .6]])
    rep = eval_word_level(truth, S)
    for k, c in enumerate("CBT"):
        assert rep[f"AUC({c})"] == roc_auc_bruteforce(S[:, k], [t == c for t in truth])
    with pytest.raises(ValueError):
        eval_word_level(["C"] * 6, S)


# -- anticipation -------------------------------------------------------------------

def test_anticipation_report(small_corpus):
    deltas = (-960, -720, -480, -240, 0)
    pooled = {d: [] for d in deltas}
    for s in small_corpus:
        est = derive_all(s.timeline).matrix()
        for ag in "AB":
            traces, skipped = anticipation_trace(est, s.timeline, deltas, default_rules(), ag)
            for d in deltas:
                pooled[d] += traces[d]
    rows = anticipation_report(pooled)
    assert [r["delta_ms"] for r in rows] == list(deltas)
    assert rows[-1]["auc"] == 1.0
    assert rows[3]["auc"] == roc_auc(*zip(*pooled[-240]))
    assert anticipation_csv(rows).splitlines()[0] == "delta_ms,auc,n"
    assert len(anticipation_csv(rows).splitlines()) == 6
