"""Anatomy of gradient conflict: weak vs dominated, and the trigger rules.

Uses the imbalanced two-bowl problem where the small task's gradient points
against the mean, then shows the ceiling rule used once tasks are numerous.
"""

import numpy as np

from mtlopt.conflict import GradientMatrix, detect_dominated, many_task_trigger
from mtlopt.metrics import stationarity_gap
from mtlopt.problems import make_quadratic_pair

suite = make_quadratic_pair([0.0, 0.0], [1.0, 0.0], scale=(1.0, 100.0))
model = suite.build_model()

for point in ([0.5, 0.0], [0.25, 0.5], [0.9, 0.1]):
    model.backbone.values[:] = point
    rows = [
        model.task_loss_and_grads(t, suite.sample_batch(t, 1, None))[1]
        for t in range(2)
    ]
    g = GradientMatrix(np.stack(rows))
    report = detect_dominated(g)
    print(f"theta={point}: norms={np.round(g.norms, 3)}, "
          f"cos(min-norm task, mean)={report.mean_cos[report.min_norm_task]:+.3f}, "
          f"dominated={report.dominated}, gap={stationarity_gap(g):.4f}")

print("\nmany-task rule: at least ceil(K/2) tasks must oppose the mean")
base = np.zeros((6, 2))
base[:3, 0] = 3.0
base[3:, 0] = -1.0
base[3:, 1] = 0.1
g = GradientMatrix(base)
report = detect_dominated(g)
print(f"K=6 with {report.many_task_count} opposing tasks -> fires: {many_task_trigger(g)}")

base[3, :] = (2.0, 0.0)  # flip one resister
g = GradientMatrix(base)
report = detect_dominated(g)
print(f"K=6 with {report.many_task_count} opposing tasks -> fires: {many_task_trigger(g)}")
