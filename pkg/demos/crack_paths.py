"""Grow a handful of fatigue cracks and report kink angles and persistence error.

    python demos/crack_paths.py
"""
import numpy as np

from microevo.fcg import build_fcg_library, grow_crack
from microevo.field import window_library
from microevo.models import Persistence, one_step_mae

for seed in range(5):
    path = grow_crack(seed=seed)
    tips = np.array([path.tip(i) for i in range(path.n_frames)])
    slopes = np.degrees(np.arctan2(np.diff(tips[:, 1]), np.diff(tips[:, 0])))
    print(f"seed {seed}: tip y (mm) {np.round(tips[:, 1], 2).tolist()}")
    print(f"        segment angles (deg) {np.round(slopes, 1).tolist()}")

lib = build_fcg_library(40, base_seed=100)
data = window_library(lib, 3, 1)
err = one_step_mae(Persistence(), data)
print(f"\n{len(data)} windows, persistence one-step MAE {err:.5f} (~{err * 132 * 96:.1f} new pixels per frame)")
