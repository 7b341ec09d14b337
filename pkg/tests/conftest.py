import numpy as np
import pytest

from turntaking.synth import GeneratorConfig, generate_corpus
from turntaking.timeline import ActivityTimeline


def random_timeline(rng, length=None, p_switch=0.15, session_id="rand"):
    """Markov-chain activity on both channels; short runs make label edge cases common."""
    T = int(length if length is not None else rng.integers(0, 300))
    chans = []
    for _ in range(2):
        x = np.zeros(T, dtype=np.uint8)
        state = int(rng.random() < 0.4)
        for t in range(T):
            if rng.random() < p_switch:
                state ^= 1
            x[t] = state
        chans.append(x)
    return ActivityTimeline(chans[0], chans[1], session_id=session_id)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(GeneratorConfig(seed=500), 12)
