"""
A synthetic conversation corpus
===============================

Generate sessions, check that derived actions reproduce what the generator
planted, and read off the corpus statistics the evaluation relies on.
"""

from collections import Counter

import numpy as np

from turntaking.actions import derive_actions
from turntaking.synth import GeneratorConfig, generate_corpus

cfg = GeneratorConfig(seed=0)
sessions = generate_corpus(cfg, 40)
print(f"{len(sessions)} sessions of {cfg.session_len_frames} frames "
      f"({cfg.session_len_frames / cfg.rate_fps:.0f} s each)")

# Every planted event should come back from the label rules, with no extras.
mismatch = 0
kinds = Counter()
for s in sessions:
    derived = sorted(derive_actions(s.timeline, "A") + derive_actions(s.timeline, "B"))
    mismatch += derived != sorted(s.log.events)
    kinds.update(e.kind for e in derived)
print("sessions with planted/derived mismatch:", mismatch)
print("action counts:", dict(kinds))
print(f"BC prior: {kinds['BC'] / sum(kinds.values()):.3f}")

# Turn transfers with a gap over one second.
gaps = np.array([g for s in sessions for g in s.log.transfer_gaps])
print(f"long-gap fraction: {(gaps > 13).mean():.3f} of {gaps.size} transfers")

# Pseudo-word boundaries for the word-level task
print("first boundaries of session 0:", sessions[0].words[:6])
