"""Tent spaces: the Fubini identity, aperture dependence and off-diagonal decay.

Run with ``python3 demos/tent.py``.
"""
import math

import numpy as np

from smrlab.grid import TorusGrid
from smrlab.tent import (TentField, aperture_slope, heat_family, log_time_grid,
                         profile_at_ratios, random_tent_corpus, resolvent_family,
                         fit_decay_order, tent_norm, weighted_l2)

grid = TorusGrid(1, 128)
edges, _, _ = log_time_grid(1 / 64, 4.0)
corpus = random_tent_corpus(grid, edges, 4, seed=0)
print("p = 2 tent norm / weighted L2:", tent_norm(corpus, 2.0, 0.5) / weighted_l2(corpus, 0.5))

edges, _, _ = log_time_grid(1.0, 2.0)
box = TentField.from_function(grid, edges, lambda t: np.ones((1,) + grid.shape))
print(f"box on [1, 2]: squared norm {float(tent_norm(box, 2.0, 0.0)) ** 2:.6f}, ln 2 = {math.log(2):.6f}")

edges, _, _ = log_time_grid(1 / 128, 2.0)
corpus = random_tent_corpus(grid, edges, 8, seed=1)
print("aperture slopes at p = 1:", np.round(aperture_slope(corpus, 1.0, 0.0), 3))

grid = TorusGrid(1, 256)
for name, family in (("heat", heat_family(grid)), ("resolvent", resolvent_family(grid, np.eye(1)))):
    rows = profile_at_ratios(grid, family, [1.0, 4.0, 16.0, 64.0], 32, 64)
    atts = ", ".join(f"{r['attenuation']:.2e}" for r in rows)
    print(f"{name}: attenuation {atts}; fitted order {fit_decay_order(rows):.2f}")
