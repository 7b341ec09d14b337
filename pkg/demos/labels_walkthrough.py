"""
Labels from two activity channels
=================================

Build a tiny two-speaker timeline by hand and look at the smoothed targets
around a turn shift, a pause and a backchannel.
"""

import numpy as np

from turntaking.labels import derive_all
from turntaking.timeline import ActivityTimeline, extract_segments, rasterize_segments

# A speaks, pauses briefly, speaks again and hands over to B.
# While B talks, A drops a 6-frame "mm-hm".
T = 140
a = rasterize_segments([(5, 30), (34, 60), (95, 101)], T)
b = rasterize_segments([(70, 130)], T)
tl = ActivityTimeline(a, b, session_id="hand")

for ch in "AB":
    print(ch, [s.span for s in extract_segments(tl, ch)])

lab = derive_all(tl)

# Offsets carry exactly one of EOT / HOLD, at the last active frame.
for name in ("eot", "hold", "bot", "bc"):
    print(f"{name:5s} A impulses at", np.flatnonzero(lab.impulses[name][0]).tolist(),
          " B:", np.flatnonzero(lab.impulses[name][1]).tolist())

# Smoothing spreads each impulse wider into the past than into the future.
np.set_printoptions(precision=3, suppress=True)
print("EOT_A around frame 59:", lab.eot[0][50:63])

# FVAD: fraction of the next windows (0-240, 240-480, 480-960, 960-2000 ms)
# in which B is active, seen from the moment A stops.
print("FVAD_B at frame 60:", lab.fvad[1, 60])
