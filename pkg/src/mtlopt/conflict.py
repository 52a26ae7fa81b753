"""Gradient-similarity computations and the teleportation trigger logic.

Conflict is measured between each task gradient and the mean gradient. The
few-task trigger fires when the smallest-norm task gradient points against
the mean; the many-task trigger fires when at least ceil(K/2) tasks do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GradientMatrix",
    "ConflictReport",
    "cos_sim",
    "detect_dominated",
    "many_task_trigger",
    "conflict_ratio",
]

_NORM_FLOOR = 1e-12


class GradientMatrix:
    """K task gradients stacked as rows, with cached mean and row norms."""

    def __init__(self, rows):
        self.rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if self.rows.shape[0] < 2:
            raise ValueError("need at least 2 task gradients")
        self.mean = self.rows.mean(axis=0)
        self.norms = np.linalg.norm(self.rows, axis=1)

    @property
    def n_tasks(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def gram(self) -> np.ndarray:
        return self.rows @ self.rows.T


def cos_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors; 0 if either is ~zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _NORM_FLOOR or nb < _NORM_FLOOR:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class ConflictReport:
    """Snapshot of per-step conflict structure at one (epoch, step)."""

    pairwise_cos: np.ndarray
    mean_cos: np.ndarray          # cos(g_i, g_0) per task
    dominated_flags: np.ndarray   # mean_cos < 0 per task
    min_norm_task: int
    dominated: bool               # smallest-norm task conflicts with the mean
    many_task_count: int
    stationary: bool              # mean gradient ~ zero; triggers suppressed
    epoch: int = 0
    step: int = 0

    def mean_pairwise_cos(self) -> float:
        """Average cosine over distinct task pairs."""
        k = self.pairwise_cos.shape[0]
        iu = np.triu_indices(k, 1)
        return float(self.pairwise_cos[iu].mean())


def detect_dominated(g: GradientMatrix, epoch: int = 0, step: int = 0) -> ConflictReport:
    """Full conflict report; `dominated` follows the smallest-norm task.

    Argmin-norm ties break to the lowest task index. A ~zero mean gradient
    means a stationary point: nothing is dominated there by convention.
    """
    k = g.n_tasks
    pairwise = np.zeros((k, k))
    for i in range(k):
        pairwise[i, i] = 1.0 if g.norms[i] >= _NORM_FLOOR else 0.0
        for j in range(i + 1, k):
            pairwise[i, j] = pairwise[j, i] = cos_sim(g.rows[i], g.rows[j])
    mean_cos = np.array([cos_sim(g.rows[i], g.mean) for i in range(k)])
    flags = mean_cos < 0.0
    min_norm_task = int(np.argmin(g.norms))
    stationary = bool(np.linalg.norm(g.mean) < _NORM_FLOOR)
    dominated = bool(flags[min_norm_task]) and not stationary
    return ConflictReport(
        pairwise_cos=pairwise,
        mean_cos=mean_cos,
        dominated_flags=flags,
        min_norm_task=min_norm_task,
        dominated=dominated,
        many_task_count=int(flags.sum()),
        stationary=stationary,
        epoch=epoch,
        step=step,
    )


def many_task_trigger(g: GradientMatrix) -> bool:
    """True when at least ceil(K/2) tasks conflict with the mean gradient."""
    report = detect_dominated(g)
    if report.stationary:
        return False
    return report.many_task_count >= math.ceil(g.n_tasks / 2)


def conflict_ratio(reports, epoch: int) -> float:
    """Fraction of this epoch's steps whose report is dominated."""
    in_epoch = [r for r in reports if r.epoch == epoch]
    if not in_epoch:
        raise ValueError(f"no reports recorded for epoch {epoch}")
    return sum(1 for r in in_epoch if r.dominated) / len(in_epoch)
