"""Conflict-triggered, adapter-realized teleportation on the loss level set.

When a dominated conflict fires, the backbone is frozen and a fresh low-rank
adapter is trained on one frozen batch per task to minimize

    L_inner = L_t - gamma * L_g

where L_t is the mean absolute deviation of task losses from their trigger
snapshot (loss invariance) and L_g is a sampled sharpness score of the
balance-weighted mean loss (a gradient-norm surrogate). If the final L_t
stays within tolerance the adapter is merged into the backbone, moving the
model to a same-loss point with steeper local geometry; otherwise the
adapter is discarded and the model is untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Batch, NumericOverflowError, ParamVector, substream
from .conflict import ConflictReport, GradientMatrix
from .models import LoraAdapter
from .optimizers import Adam

__all__ = [
    "TeleportConfig",
    "LossSnapshot",
    "BalanceWeights",
    "TeleportOutcome",
    "should_teleport",
    "loss_fluctuation",
    "balance_weights",
    "estimate_sharpness",
    "teleport",
    "take_snapshot",
]


@dataclass
class TeleportConfig:
    """Knobs for the trigger gates and the adapter inner loop.

    `delta` and `lt_tolerance` may be given as absolute values; when left at
    None they scale with the current point: delta = delta_scale * (1 + ||theta||)
    and lt_tolerance = lt_tolerance_scale * (1 + mean |L*|).
    """

    gamma: float = 0.1
    n_samples: int = 8               # sphere draws per sharpness estimate
    delta: float | None = None       # sphere radius; None -> scaled
    delta_scale: float = 0.01
    rank: int = 5
    inner_steps: int = 20
    inner_lr: float = 1e-3
    lt_tolerance: float | None = None
    lt_tolerance_scale: float = 0.01
    delayed_start_epochs: int = 1
    max_teleports_per_epoch: int = 5
    regime_cutoff: int = 5           # few-task trigger below, many-task at/above
    sharpness_form: str = "absolute"  # "absolute" | "difference"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.n_samples < 1:
            raise ValueError("need at least one sphere sample")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.rank < 1 or self.inner_steps < 0 or self.inner_lr <= 0:
            raise ValueError("rank, inner_steps, inner_lr must be positive")
        if self.lt_tolerance is not None and self.lt_tolerance <= 0:
            raise ValueError("lt_tolerance must be positive")
        if self.sharpness_form not in ("absolute", "difference"):
            raise ValueError("sharpness_form must be 'absolute' or 'difference'")

    def radius(self, theta: np.ndarray) -> float:
        if self.delta is not None:
            return self.delta
        return self.delta_scale * (1.0 + float(np.linalg.norm(theta)))

    def tolerance(self, snapshot_losses: np.ndarray) -> float:
        if self.lt_tolerance is not None:
            return self.lt_tolerance
        return self.lt_tolerance_scale * (1.0 + float(np.mean(np.abs(snapshot_losses))))


@dataclass
class LossSnapshot:
    """Per-task losses and the frozen batches they were measured on."""

    losses: np.ndarray
    batches: list

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if not np.isfinite(self.losses).all():
            raise ValueError("snapshot losses must be finite")
        if len(self.batches) != self.losses.size:
            raise ValueError("one frozen batch per task required")


@dataclass
class BalanceWeights:
    """Softmax norm-ratio weights; larger for lagging (small-norm) tasks."""

    r: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        if (self.r <= 0).any():
            raise ValueError("balance weights must be positive")
        if abs(self.r.sum() - self.r.size) > 1e-9:
            raise ValueError("balance weights must sum to K")


@dataclass
class TeleportOutcome:
    """Record of one teleport attempt.

    `grad_norm_before/after` track the norm of the balance-weighted mean
    gradient (1/K) sum_i R_i g_i with R frozen at trigger time: that is the
    gradient whose magnitude the inner objective maximizes. Cosine matrices
    and the after-norm are recomputed on the frozen batches post-merge.
    """

    delta_theta: np.ndarray
    final_lt: float
    final_lg: float
    grad_norm_before: float
    grad_norm_after: float
    pre_grad: np.ndarray | None
    pairwise_cos_before: np.ndarray
    pairwise_cos_after: np.ndarray | None
    inner_steps_used: int
    accepted: bool

    def mean_cos_change(self) -> float:
        if self.pairwise_cos_after is None:
            return 0.0
        k = self.pairwise_cos_before.shape[0]
        iu = np.triu_indices(k, 1)
        return float(
            self.pairwise_cos_after[iu].mean() - self.pairwise_cos_before[iu].mean()
        )


def take_snapshot(model, batches) -> LossSnapshot:
    """Freeze the per-task losses on the given batches at the current point."""
    losses = np.array([model.task_loss(t, batches[t]) for t in range(model.n_tasks)])
    return LossSnapshot(losses, list(batches))


def should_teleport(report: ConflictReport, cfg: TeleportConfig, epoch: int,
                    teleports_this_epoch: int) -> bool:
    """Delayed start, per-epoch frequency cap, then the regime trigger."""
    if epoch < cfg.delayed_start_epochs:
        return False
    if teleports_this_epoch >= cfg.max_teleports_per_epoch:
        return False
    if report.stationary:
        return False
    k = report.dominated_flags.size
    if k < cfg.regime_cutoff:
        return report.dominated
    return report.many_task_count >= math.ceil(k / 2)


def loss_fluctuation(current, snapshot: LossSnapshot) -> float:
    """Mean absolute deviation of current losses from the frozen snapshot."""
    current = np.asarray(current, dtype=np.float64)
    if current.shape != snapshot.losses.shape:
        raise ValueError("loss vector length mismatch")
    return float(np.mean(np.abs(current - snapshot.losses)))


def balance_weights(g: GradientMatrix) -> BalanceWeights:
    """R = K * softmax(sum_j ||g_j|| / ||g_i||), stabilized by max subtraction.

    Weights are floored at 1e-12 before renormalization: with extreme norm
    ratios the softmax underflows float64, and the weights must stay
    strictly positive.
    """
    if (g.norms <= 0).any():
        raise ValueError("balance weights need strictly positive gradient norms")
    ratios = g.norms.sum() / g.norms
    z = ratios - ratios.max()
    e = np.maximum(np.exp(z), 1e-12)
    return BalanceWeights(g.n_tasks * e / e.sum())


# ---------------------------------------------------------------------------
# Sharpness estimation
# ---------------------------------------------------------------------------


def _sphere_sample(rng, dim: int, radius: float) -> np.ndarray:
    v = rng.normal(size=dim)
    n = np.linalg.norm(v)
    while n < 1e-30:  # pragma: no cover - essentially impossible
        v = rng.normal(size=dim)
        n = np.linalg.norm(v)
    return v * (radius / n)


def _weighted_loss_node(model, adapter: LoraAdapter, r: np.ndarray,
                        snapshot: LossSnapshot, epsilon: np.ndarray | None,
                        leaves: dict | None = None):
    """Graph for (1/K) sum_i R_i L_i(theta + Delta + eps) on the frozen batches.

    Only the adapter factors are trainable; passing `leaves` shares them with
    other graphs so a single backward pass covers all of them.
    """
    base = model.backbone
    if epsilon is not None:
        base = ParamVector(base.values + epsilon, base.layout)
    weights, leaves = adapter.weight_nodes(base, leaves)
    k = model.n_tasks
    heads = getattr(model, "heads", [])
    loss_nodes = []
    for t in range(k):
        w = dict(weights)
        if t < len(heads):
            for name, _shape in heads[t].layout.entries:
                w[name] = ad.constant(heads[t].view(name), name=name)
        loss_nodes.append(model.build_task_loss(t, w, snapshot.batches[t]))
    combined = ad.affine_combine(loss_nodes, [ri / k for ri in r])
    return combined, loss_nodes, leaves


def estimate_sharpness(model, adapter: LoraAdapter, r: BalanceWeights,
                       snapshot: LossSnapshot, cfg: TeleportConfig, seed: int) -> float:
    """Sampled sharpness of the balance-weighted mean loss around theta+Delta.

    Draws n_samples perturbations uniformly on the radius-delta sphere over
    the backbone coordinates and returns the largest |weighted loss| (the
    printed objective) or |weighted loss difference| when sharpness_form is
    "difference".
    """
    rng = substream(seed, "sphere-samples")
    radius = cfg.radius(model.backbone.values)
    center, _, _ = _weighted_loss_node(model, adapter, r.r, snapshot, None)
    center_val = float(center.value)
    best = -np.inf
    for _ in range(cfg.n_samples):
        eps = _sphere_sample(rng, model.backbone_layout.size, radius)
        node, _, _ = _weighted_loss_node(model, adapter, r.r, snapshot, eps)
        val = float(node.value)
        score = abs(val - center_val) if cfg.sharpness_form == "difference" else abs(val)
        best = max(best, score)
    return best


# ---------------------------------------------------------------------------
# The teleport procedure
# ---------------------------------------------------------------------------


def _task_gradients(model, batches) -> GradientMatrix:
    rows = []
    for t in range(model.n_tasks):
        _, g_backbone, _ = model.task_loss_and_grads(t, batches[t])
        rows.append(g_backbone)
    return GradientMatrix(np.stack(rows))


def _adapter_vector(adapter: LoraAdapter) -> np.ndarray:
    return np.concatenate([arr.ravel() for arr in adapter.trainable()])


def _write_adapter(adapter: LoraAdapter, flat: np.ndarray):
    offset = 0
    for arr in adapter.trainable():
        n = arr.size
        arr.ravel()[:] = flat[offset:offset + n]
        offset += n


def _leaf_grads_flat(adapter: LoraAdapter, leaves: dict, node) -> np.ndarray:
    ordered = []
    for name in adapter.pairs:
        a_node, b_node = leaves[name]
        ordered.extend([a_node, b_node])
    grads = ad.gradients(node, ordered)
    return np.concatenate([gr.ravel() for gr in grads])


def teleport(model, snapshot: LossSnapshot, g_at_trigger: GradientMatrix,
             cfg: TeleportConfig, seed: int,
             pre_grad: np.ndarray | None = None) -> TeleportOutcome:
    """Run one teleport attempt; merge only if loss invariance holds.

    The balance weights are computed once from the trigger-time gradients and
    the whole inner loop runs on the frozen snapshot batches. On rejection
    (final L_t above tolerance, or a non-finite inner value) the model is
    left bit-identical.
    """
    from .models import attach_lora, merge_lora  # local to avoid cycle

    k = model.n_tasks
    r = balance_weights(g_at_trigger)
    tol = cfg.tolerance(snapshot.losses)
    radius = cfg.radius(model.backbone.values)
    grad_norm_before = _weighted_norm(g_at_trigger, r)
    cos_before = _pairwise_cos(g_at_trigger)

    adapter = attach_lora(model, rank=cfg.rank, seed=seed)
    sphere_rng = substream(seed, "sphere-samples")
    inner = Adam(dim=_adapter_vector(adapter).size, lr=cfg.inner_lr)
    flat = _adapter_vector(adapter)
    steps_used = 0
    rejected = False

    try:
        for _step in range(cfg.inner_steps):
            leaves = adapter.make_leaves()
            center, loss_nodes, _ = _weighted_loss_node(
                model, adapter, r.r, snapshot, None, leaves)
            # L_t: mean |L_i(theta+Delta) - L_i*| on the frozen batches
            devs = [ad.absval(ad.add_const(node, -snapshot.losses[t]))
                    for t, node in enumerate(loss_nodes)]
            objective = ad.affine_combine(devs, [1.0 / k] * k)

            if cfg.gamma > 0.0:
                best_node, best_score = None, -np.inf
                for _j in range(cfg.n_samples):
                    eps = _sphere_sample(sphere_rng, model.backbone_layout.size, radius)
                    node, _, _ = _weighted_loss_node(
                        model, adapter, r.r, snapshot, eps, leaves)
                    if cfg.sharpness_form == "difference":
                        score_node = ad.absval(ad.sub(node, center))
                    else:
                        score_node = ad.absval(node)
                    if float(score_node.value) > best_score:
                        best_score = float(score_node.value)
                        best_node = score_node
                objective = ad.affine_combine([objective, best_node], [1.0, -cfg.gamma])

            grad = _leaf_grads_flat(adapter, leaves, objective)
            flat = inner.step(flat, grad)
            _write_adapter(adapter, flat)
            steps_used += 1
    except NumericOverflowError:
        rejected = True

    if rejected:
        final_lt, final_lg = float("inf"), 0.0
    else:
        current = np.array([
            model.task_loss(t, snapshot.batches[t], adapter=adapter) for t in range(k)
        ])
        final_lt = loss_fluctuation(current, snapshot)
        final_lg = estimate_sharpness(model, adapter, r, snapshot, cfg, seed)

    accepted = (not rejected) and final_lt <= tol
    if accepted:
        delta = merge_lora(model, adapter)
        g_after = _task_gradients(model, snapshot.batches)
        grad_norm_after = _weighted_norm(g_after, r)
        cos_after = _pairwise_cos(g_after)
    else:
        delta = np.zeros(model.backbone_layout.size)
        grad_norm_after = grad_norm_before
        cos_after = None

    return TeleportOutcome(
        delta_theta=delta,
        final_lt=final_lt,
        final_lg=final_lg,
        grad_norm_before=grad_norm_before,
        grad_norm_after=grad_norm_after,
        pre_grad=None if pre_grad is None else np.asarray(pre_grad, dtype=np.float64),
        pairwise_cos_before=cos_before,
        pairwise_cos_after=cos_after,
        inner_steps_used=steps_used,
        accepted=accepted,
    )


def _pairwise_cos(g: GradientMatrix) -> np.ndarray:
    from .conflict import detect_dominated

    return detect_dominated(g).pairwise_cos


def _weighted_norm(g: GradientMatrix, r: BalanceWeights) -> float:
    return float(np.linalg.norm((r.r[:, None] * g.rows).mean(axis=0)))
