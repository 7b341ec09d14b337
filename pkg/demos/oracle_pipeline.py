"""
Oracle estimates through the whole pipeline
===========================================

Feed the smoothed labels themselves as "model output".  Streaming, fusion
and every scoring protocol should then be perfect, which makes this run a
plumbing check for everything downstream of the model.
"""

import numpy as np

from turntaking.actions import derive_actions, derive_word_level_classes
from turntaking.evaluation import eval_agent_actions, eval_vap_protocol, eval_word_level
from turntaking.fusion import default_rules, word_scores
from turntaking.labels import derive_all
from turntaking.stream import run_session
from turntaking.synth import GeneratorConfig, generate_corpus

sessions = generate_corpus(GeneratorConfig(seed=0), 20)
policy = default_rules()

truth, preds, vap, words, scores = {}, {}, [], [], []
for s in sessions:
    est = derive_all(s.timeline).matrix()
    for agent in "AB":
        truth[(s.seed, agent)] = derive_actions(s.timeline, agent)
        preds[(s.seed, agent)], timing, _ = run_session(est, policy, s.timeline, agent)
    vap.append((s.timeline, est))
    words += derive_word_level_classes(s.timeline, s.words)
    scores.append(word_scores(est, s.words))

rep = eval_agent_actions(truth, preds)
print(f"5-class wF1 {rep.wf1:.3f}  per class", {k: round(v, 3) for k, v in rep.per_class_f1.items()})

v = eval_vap_protocol(vap)
for task in ("S/H", "S/L", "S-P", "BC-P"):
    print(f"{task:5s} wF1 {v[task]['wf1']:.3f} on {v[task]['n']} events")

w = eval_word_level(words, np.concatenate(scores))
print(f"word level: Avg AUC {w['Avg']:.3f}, EER {w['EER']:.3f}, counts {w['counts']}")

# One decision from the last session's log
d = preds[(sessions[-1].seed, "B")][0]
print(d.to_json())
