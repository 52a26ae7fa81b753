"""Evaluation metrics: mean relative degradation, mean rank, stationarity gap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .combiners import min_norm_weights
from .conflict import GradientMatrix

__all__ = ["MetricTable", "delta_m", "mean_rank", "stationarity_gap"]


def delta_m(method_row, baseline_row, higher_better) -> float:
    """Mean signed relative degradation vs. per-metric baselines, in percent.

    Metrics where higher is better contribute with flipped sign, so negative
    totals mean the method beats the independent baselines on average.
    """
    method_row = np.asarray(method_row, dtype=np.float64)
    baseline_row = np.asarray(baseline_row, dtype=np.float64)
    higher_better = np.asarray(higher_better, dtype=bool)
    if not (method_row.shape == baseline_row.shape == higher_better.shape):
        raise ValueError("method, baseline, and direction rows must align")
    for k, base in enumerate(baseline_row):
        if base == 0.0:
            raise ValueError(f"baseline for metric {k} is zero; delta_m undefined")
    signs = np.where(higher_better, -1.0, 1.0)
    return float(np.mean(signs * (method_row - baseline_row) / baseline_row) * 100.0)


@dataclass
class MetricTable:
    """Per-method metric values plus directions and the baseline row."""

    methods: list
    values: np.ndarray            # (n_methods, n_metrics)
    higher_better: np.ndarray     # (n_metrics,)
    baseline: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.higher_better = np.asarray(self.higher_better, dtype=bool)
        if len(self.methods) != self.values.shape[0]:
            raise ValueError("one row per method required")
        if self.higher_better.shape != (self.values.shape[1],):
            raise ValueError("one direction flag per metric required")
        if not np.isfinite(self.values).all():
            raise ValueError("metric table must be fully populated and finite")

    def delta_m_column(self) -> np.ndarray:
        if self.baseline is None:
            raise ValueError("no baseline row recorded")
        return np.array([
            delta_m(row, self.baseline, self.higher_better) for row in self.values
        ])


def mean_rank(table: MetricTable) -> np.ndarray:
    """Average rank of each method across metrics (best = 1, ties averaged)."""
    if len(table.methods) < 2:
        raise ValueError("mean rank needs at least 2 methods")
    ranks = np.empty_like(table.values)
    for k in range(table.values.shape[1]):
        col = table.values[:, k]
        keyed = -col if table.higher_better[k] else col
        ranks[:, k] = rankdata(keyed, method="average")
    return ranks.mean(axis=1)


def stationarity_gap(g: GradientMatrix) -> float:
    """Min-norm combined gradient over the simplex; 0 iff Pareto stationary."""
    omega = min_norm_weights(g).omega
    return float(np.linalg.norm(g.rows.T @ omega))
