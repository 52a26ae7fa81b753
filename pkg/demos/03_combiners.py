"""Compare the gradient-combination strategies on one conflicted matrix.

Shows the direction each combiner produces, its alignment with the mean, and
the min-norm solver that measures distance from Pareto stationarity.
"""

import numpy as np

from mtlopt.combiners import (
    combine_cagrad,
    combine_fairgrad,
    combine_ls,
    combine_pcgrad,
    min_norm_weights,
)
from mtlopt.conflict import GradientMatrix, cos_sim

rows = np.array([
    [1.0, 0.2, 0.0],
    [-0.8, 1.0, 0.1],
    [0.3, -1.2, 0.9],
])
g = GradientMatrix(rows)
print("task gradient norms:", np.round(g.norms, 3))
print("mean gradient:      ", np.round(g.mean, 3))

for name, direction in [
    ("ls      ", combine_ls(g)),
    ("pcgrad  ", combine_pcgrad(g, seed=3)),
    ("cagrad  ", combine_cagrad(g, c=0.5)),
    ("fairgrad", combine_fairgrad(g, alpha=2.0)),
]:
    per_task = rows @ direction
    print(f"{name} -> {np.round(direction, 3)}  |d|={np.linalg.norm(direction):.3f}  "
          f"cos(d, mean)={cos_sim(direction, g.mean):+.3f}  "
          f"min task alignment={per_task.min():+.3f}")

w = min_norm_weights(g)
print(f"\nmin-norm weights: {np.round(w.omega, 4)}")
print(f"stationarity gap: {np.linalg.norm(rows.T @ w.omega):.6f} "
      "(zero would mean Pareto stationary)")
