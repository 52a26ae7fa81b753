"""One teleport, dissected: balance weights, the inner loop, the gate.

Starts from a dominated point of the imbalanced two-bowl problem, runs the
adapter inner loop, and reports what moved and what stayed invariant.
"""

import numpy as np

from mtlopt.conflict import GradientMatrix, detect_dominated
from mtlopt.problems import make_quadratic_pair
from mtlopt.teleport import (
    TeleportConfig,
    balance_weights,
    loss_fluctuation,
    take_snapshot,
    teleport,
)

suite = make_quadratic_pair([0.0, 0.0], [1.0, 0.0], scale=(1.0, 100.0))
model = suite.build_model()
model.backbone.values[:] = [0.5, 0.3]

batches = [suite.sample_batch(t, 1, None) for t in range(2)]
snapshot = take_snapshot(model, batches)
rows = [model.task_loss_and_grads(t, batches[t])[1] for t in range(2)]
g = GradientMatrix(np.stack(rows))

print(f"start theta = {model.backbone.values}")
print(f"losses at trigger: {np.round(snapshot.losses, 4)}")
print(f"dominated conflict: {detect_dominated(g).dominated}")
r = balance_weights(g)
print(f"balance weights (lagging task upweighted): {np.round(r.r, 4)}")

cfg = TeleportConfig(gamma=1.0, delta=0.3, rank=1, inner_steps=500, inner_lr=0.01)
out = teleport(model, snapshot, g, cfg, seed=10)

print(f"\naccepted: {out.accepted} after {out.inner_steps_used} inner steps")
print(f"theta moved to {np.round(model.backbone.values, 4)} "
      f"(displacement {np.linalg.norm(out.delta_theta):.4f})")
current = [model.task_loss(t, batches[t]) for t in range(2)]
print(f"losses after merge: {np.round(current, 4)} "
      f"(fluctuation {loss_fluctuation(current, snapshot):.5f} <= "
      f"tolerance {cfg.tolerance(snapshot.losses):.5f})")
print(f"weighted gradient norm: {out.grad_norm_before:.4f} -> {out.grad_norm_after:.4f}")
print(f"mean pairwise cosine change: {out.mean_cos_change():+.4f}")
