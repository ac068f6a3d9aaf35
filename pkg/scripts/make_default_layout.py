"""Regenerate src/fiducial_attitude/data/default_system.json.

The layout is representative only: 4 PCBs x 5 LEDs.  Coordinates are first
laid out along the identification axis (s: reference LED -> last LED, t:
across it) and then rotated so the reference LED sits at the top-left of the
image at identity attitude.
"""

import json
import sys
from pathlib import Path

import numpy as np

SCALE = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0

# (s, t) in metres before scaling.  Every LED has its own s value, 20 mm
# from its neighbours and 30 mm or more between boards, so the reading order
# never hinges on a tie-break that perspective could flip.  The reference LED
# sits alone at the far -s end.
_ZIG = (0.021, -0.021, 0.021, -0.021, 0.021)
_STEP = 0.02 * np.arange(5)
PCBS = [
    [(-0.235, 0.0)] + list(zip(-0.185 + _STEP[:4], (0.0, -0.03, 0.03, 0.0))),
    list(zip(-0.095 + _STEP, (-0.15 + z for z in _ZIG))),
    list(zip(0.015 + _STEP, (0.15 - z for z in _ZIG))),
    list(zip(0.115 + _STEP, (0.0, 0.03, -0.03, 0.03, 0.0))),
]

# s runs towards the bottom-right of the image; image v grows with -y
s_hat = np.array([1.0, -1.0]) / np.sqrt(2.0)
t_hat = np.array([1.0, 1.0]) / np.sqrt(2.0)

patterns = []
for pcb in PCBS:
    pts = []
    for s, t in pcb:
        xy = SCALE * (s * s_hat + t * t_hat)
        pts.append([round(1e3 * xy[0], 4), round(1e3 * xy[1], 4), 0.0])
    patterns.append({"r_skb_mm": [0.0, 0.0, 0.0], "p_bsk": [1.0, 0.0, 0.0], "markers_mm": pts})

cfg = {
    "_comment": "Representative layout, not the exact dimensions of any physical rig.",
    "intrinsics": {"fx": 3478.0, "fy": 3478.0, "cx": 1024.0, "cy": 768.0, "w": [0.0, 0.0, 0.0]},
    "geometry": {"r_bn_m": [0.0, 0.0, 0.042], "r_nc_m": [0.0, 0.0, 1.27], "patterns": patterns},
    "image_size": [2048, 1536],
}
out = Path(__file__).resolve().parents[1] / "src" / "fiducial_attitude" / "data" / "default_system.json"
# the geometry loader picks one unit suffix per dict; keep top-level in metres
out.write_text(json.dumps(cfg, indent=2) + "\n")
print(out)
