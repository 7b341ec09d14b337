"""
A logistic-regression fusion probe
==================================

Fit the multinomial probe on oracle signals at each action anchor and read
its coefficients.  The heaviest weights should sit on the signals the
action definitions are built from.
"""

import numpy as np

from turntaking.actions import ACTIONS, derive_actions
from turntaking.fusion import ROLE_COLUMNS, anchor_features, decision_frame, lr_fit
from turntaking.labels import derive_all
from turntaking.synth import GeneratorConfig, generate_corpus

X, y = [], []
for s in generate_corpus(GeneratorConfig(seed=50), 30):
    est = derive_all(s.timeline).matrix()
    for agent in "AB":
        events = derive_actions(s.timeline, agent)
        X.append(anchor_features(est, [decision_frame(e, len(est)) for e in events], agent))
        y += [e.kind for e in events]
X = np.concatenate(X)

probe = lr_fit(X, y, l2=1e-3)
print({k: v for k, v in probe.diagnostics.items() if k != "loss_history_tail"})

acc = np.mean(np.asarray(ACTIONS)[probe.predict_proba(X).argmax(axis=1)] == np.asarray(y))
print(f"training accuracy {acc:.3f} on {len(y)} anchors")

# The three largest coefficients for each action
for k, action in enumerate(ACTIONS):
    top = np.argsort(-probe.weights[:, k])[:3]
    print(f"{action}: " + ", ".join(f"{ROLE_COLUMNS[i]} {probe.weights[i, k]:+.2f}" for i in top))
