import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turntaking.labels import (LabelConfig, derive_all, derive_bc, derive_bot, derive_eot_hold, derive_fvad,
                               fvad_windows, read_label_csv, smooth_impulses, write_label_csv)
from turntaking.signals import swap_columns
from turntaking.timeline import ActivityTimeline, extract_segments, rasterize_segments

from conftest import random_timeline


def make(T, a_segs=(), b_segs=()):
    return ActivityTimeline(rasterize_segments(a_segs, T), rasterize_segments(b_segs, T))


def test_eot_example():
    t = make(100, [(0, 10)], [(20, 60)])
    eot, hold = derive_eot_hold(t, "A")
    assert eot[9] == 1 and hold.sum() == 0 and eot.sum() == 1


def test_hold_when_nobody_speaks():
    eot, hold = derive_eot_hold(make(100, [(0, 10)]), "A")
    assert hold[9] == 1 and eot.sum() == 0


def test_hold_when_self_resumes_first_and_tie_goes_to_eot():
    eot, hold = derive_eot_hold(make(100, [(0, 10), (15, 30)], [(20, 60)]), "A")
    assert hold[9] == 1 and eot[9] == 0
    eot, _ = derive_eot_hold(make(100, [(0, 10), (20, 30)], [(20, 60)]), "A")
    assert eot[9] == 1


def test_eot_lookahead_is_four_seconds():
    eot, hold = derive_eot_hold(make(200, [(0, 10)], [(59, 120)]), "A")   # 49 frames later
    assert eot[9] == 1
    eot, hold = derive_eot_hold(make(200, [(0, 10)], [(60, 120)]), "A")   # 50 frames = 4 s
    assert hold[9] == 1


def test_backchannel_does_not_take_the_floor():
    # B's 5-frame isolated utterance is a BC, so A's offset is a HOLD
    eot, hold = derive_eot_hold(make(200, [(0, 10)], [(20, 25)]), "A")
    assert hold[9] == 1


def test_empty_timeline():
    e, h = derive_eot_hold(make(0), "A")
    assert e.size == 0 and h.size == 0
    e, h = derive_eot_hold(make(40), "A")
    assert e.sum() == 0 and h.sum() == 0


def test_bot_examples():
    assert derive_bot(make(100, [(30, 60)], [(0, 20)]), "A")[30] == 1
    assert derive_bot(make(100, [(30, 40)], [(0, 20)]), "A").sum() == 0
    assert derive_bot(make(100, [(30, 60)]), "A").sum() == 0


def test_bc_examples():
    assert derive_bc(make(200, [(100, 108)]), "A")[100] == 1
    assert derive_bc(make(200, [(100, 120)]), "A").sum() == 0
    assert derive_bc(make(200, [(100, 104), (109, 113)]), "A").sum() == 0


def test_fvad_examples():
    t = make(30, [(0, 3)])
    f = derive_fvad(t, "A")
    assert f[0, 0] == 1.0
    assert np.all(derive_fvad(make(30), "A") == 0)
    t = make(10, [(0, 10)])
    assert derive_fvad(t, "A")[9].tolist() == [1.0, 0.0, 0.0, 0.0]
    assert fvad_windows(t.rate) == [(0, 3), (3, 6), (6, 12), (12, 25)]


def test_smoothing_examples():
    imp = np.zeros(20)
    imp[10] = 1
    s = smooth_impulses(imp)
    assert s[10] == 1.0
    assert abs(s[7] - math.exp(-0.5)) < 1e-12
    assert abs(s[11] - math.exp(-0.5)) < 1e-12
    assert s[0] == 0.0 and s[14] == 0.0      # beyond 3 sigma
    assert np.all(smooth_impulses(np.zeros(5)) == 0)
    imp[11] = 1
    two = smooth_impulses(imp)
    one_a = smooth_impulses(np.eye(20)[10])
    one_b = smooth_impulses(np.eye(20)[11])
    assert np.array_equal(two, np.maximum(one_a, one_b))


def test_all_silence_labels():
    lab = derive_all(make(50))
    m = lab.matrix()
    assert np.all(m == 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_label_properties(seed):
    rng = np.random.default_rng(seed)
    t = random_timeline(rng)
    lab = derive_all(t)
    m = lab.matrix()
    assert m.shape == (len(t), 18)
    assert np.all((m >= 0) & (m <= 1))
    for c, ch in enumerate("AB"):
        segs = extract_segments(t, ch)
        offsets = {s.last_frame for s in segs if s.offset_frame < len(t)}
        onsets = {s.onset_frame for s in segs}
        e, h = lab.impulses["eot"][c], lab.impulses["hold"][c]
        for f in range(len(t)):
            if f in offsets:
                assert e[f] + h[f] == 1
            else:
                assert e[f] == 0 and h[f] == 0
        assert set(np.flatnonzero(lab.impulses["bc"][c])) <= onsets
        assert set(np.flatnonzero(lab.impulses["bot"][c])) <= onsets
        # event frames carry exactly 1 after smoothing
        for k in ("eot", "hold", "bot", "bc"):
            assert np.all(getattr(lab, k)[c][lab.impulses[k][c] == 1] == 1.0)
        # horizon-0 FVAD equals a brute-force windowed mean
        x = t.channel(ch)
        brute = [x[f:min(f + 3, len(t))].mean() if f < len(t) else 0 for f in range(len(t))]
        assert np.allclose(lab.fvad[c, :, 0], brute)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_channel_swap_equivariance(seed):
    t = random_timeline(np.random.default_rng(seed))
    assert np.array_equal(derive_all(t.swapped()).matrix(), swap_columns(derive_all(t).matrix()))


def test_smoothing_asymmetry():
    s = smooth_impulses(np.eye(30)[15])
    for k in range(2, 10):
        assert s[15 - k] >= s[15 + k]


def test_label_csv_round_trip(tmp_path):
    t = make(60, [(5, 30)], [(35, 55)])
    lab = derive_all(t)
    write_label_csv(tmp_path / "l.csv", lab)
    assert np.allclose(read_label_csv(tmp_path / "l.csv"), lab.matrix(), atol=1e-6)
    header = (tmp_path / "l.csv").read_text().splitlines()[0]
    assert header == "frame,ch,eot,hold,bot,bc,vad,fvad0,fvad1,fvad2,fvad3"


def test_config_validation():
    with pytest.raises(ValueError):
        LabelConfig(eot_lookahead_ms=0)
    with pytest.raises(ValueError):
        LabelConfig(bc_max_dur_ms=-1)
