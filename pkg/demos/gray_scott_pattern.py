"""Watch a Gray-Scott pattern form from a patched start and write PGM snapshots.

    python demos/gray_scott_pattern.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from microevo.field import export_pgm
from microevo.turing import GrayScottParams, random_initial_condition, run

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_gray_scott")
out.mkdir(parents=True, exist_ok=True)

p = GrayScottParams()
state = random_initial_condition(p.grid, seed=0, dtype=np.float64)
for k in range(9):
    export_pgm(state.u, out / f"u_{k * 250:05d}.pgm")
    print(f"step {k * 250:5d}  var(u)={np.var(state.u):.4f}  min(u)={state.u.min():.3f}")
    state = run(state, p, 250)
print(f"snapshots in {out}/")
