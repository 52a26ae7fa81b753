"""Task suites: analytic two-task landscapes, synthetic MLP tasks, CSV data.

Analytic suites carry their own loss-program builders over a bare 2-parameter
layout (stored as a (2, 1) weight matrix so rank-1 adapters span the plane).
Dataset suites carry per-task regression arrays for a shared-backbone MLP.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Batch, ParamLayout, ParamVector, substream
from .models import RawParamModel, SharedBackboneModel

__all__ = [
    "DegenerateProblemError",
    "DatasetFormatError",
    "TaskSuite",
    "make_quadratic_pair",
    "make_ravine_toy",
    "make_synthetic_multitask",
    "load_csv_dataset",
    "RAVINE_CONSTANTS",
    "RAVINE_ADVERSARIAL_INITS",
]


class DegenerateProblemError(ValueError):
    """Problem construction collapsed (e.g. both quadratic centers equal)."""


class DatasetFormatError(ValueError):
    """A data file violated the documented CSV conventions."""


_DUMMY = lambda t: Batch(np.zeros((1, 1)), np.zeros((1, 1)), task_id=t)


@dataclass
class TaskSuite:
    """K differentiable task losses plus the data or constants behind them."""

    n_tasks: int
    kind: str                          # "analytic" | "dataset"
    metric_directions: list            # higher-better flag per reported metric
    layout: ParamLayout | None = None  # analytic suites
    builders: list | None = None
    init_point: np.ndarray | None = None
    pareto_oracle: object = None
    sample_box: tuple | None = None    # (low, high) box for property checks
    lora_rank: int = 1
    d_in: int = 0
    d_out: int = 0
    data: list | None = None           # dataset suites: [(X, Y)] per task

    def __post_init__(self):
        if self.n_tasks < 2:
            raise ValueError("K >= 2 required")
        if len(self.metric_directions) != self.n_tasks:
            raise ValueError("one metric direction per task required")

    # -- models ---------------------------------------------------------------

    def build_model(self, model_cfg: dict | None = None, seed: int = 0):
        cfg = dict(model_cfg or {})
        if self.kind == "analytic":
            model = RawParamModel(
                self.layout,
                self.layout.flatten({"theta": np.asarray(self.init_point).reshape(2, 1)}),
                self.builders,
                lora_rank=self.lora_rank,
            )
            init = cfg.get("init_point")
            if init is not None:
                model.backbone.values[:] = np.asarray(init, dtype=np.float64).ravel()
            return model
        def widths(value):
            return [int(value)] if np.isscalar(value) else [int(v) for v in value]

        return SharedBackboneModel(
            d_in=self.d_in,
            backbone_widths=widths(cfg.get("backbone", [32, 16])),
            head_widths=widths(cfg.get("heads", [self.d_out])),
            n_tasks=self.n_tasks,
            activation=cfg.get("activation", "tanh"),
            lora_rank=int(cfg.get("lora_rank", 5)),
            seed=seed,
        )

    # -- data -----------------------------------------------------------------

    def sample_batch(self, task: int, batch_size: int, rng) -> Batch:
        if self.kind == "analytic":
            return _DUMMY(task)
        x, y = self.data[task]
        idx = rng.integers(0, x.shape[0], size=min(batch_size, x.shape[0]))
        return Batch(x[idx], y[idx], task_id=task)

    def full_batch(self, task: int) -> Batch:
        if self.kind == "analytic":
            return _DUMMY(task)
        x, y = self.data[task]
        return Batch(x, y, task_id=task)


# ---------------------------------------------------------------------------
# Quadratic pair
# ---------------------------------------------------------------------------


def make_quadratic_pair(a, b, scale=(1.0, 1.0)) -> TaskSuite:
    """Two quadratic bowls L_i = s_i ||theta - c_i||^2 with a known Pareto set.

    The Pareto set is the segment [a, b] regardless of the scales; the oracle
    tests segment membership within 1e-9.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    s1, s2 = float(scale[0]), float(scale[1])
    if a.shape != (2,) or b.shape != (2,):
        raise ValueError("quadratic pair is a 2-parameter problem")
    if np.allclose(a, b):
        raise DegenerateProblemError("quadratic centers coincide")
    if s1 <= 0 or s2 <= 0:
        raise ValueError("scales must be positive")

    layout = ParamLayout([("theta", (2, 1))])

    def bowl(center, s):
        col = center.reshape(2, 1)

        def build(leaves, batch):
            diff = ad.add_const(leaves["theta"], -col)
            return ad.scale(ad.total(ad.square(diff)), s)

        return build

    seg = b - a
    seg_len2 = float(seg @ seg)

    def oracle(theta) -> bool:
        theta = np.asarray(theta, dtype=np.float64).ravel()
        t = float((theta - a) @ seg) / seg_len2
        t = min(max(t, 0.0), 1.0)
        return bool(np.linalg.norm(theta - (a + t * seg)) <= 1e-9)

    return TaskSuite(
        n_tasks=2,
        kind="analytic",
        metric_directions=[False, False],
        layout=layout,
        builders=[bowl(a, s1), bowl(b, s2)],
        init_point=(a + b) / 2.0 + np.array([0.0, 1.0]),
        pareto_oracle=oracle,
        sample_box=(np.minimum(a, b) - 1.0, np.maximum(a, b) + 1.0),
        lora_rank=1,
    )


# ---------------------------------------------------------------------------
# Ravine toy (annular two-lane landscape)
# ---------------------------------------------------------------------------

# Frozen after tuning. The landscape is an annular track around the origin:
# task 0 drives the angle toward PHI_DRIVE, task 1 resists toward PHI_RESIST.
# Task 0 carries a sigmoid bank outside R_BAND (pushes inward) and task 1 a
# Gaussian ridge just inside it (pushes outward): together they pin plain
# mean-gradient descent in a radial tug-of-war lane where the smaller
# gradient (the resister's) points against the mean, i.e. a dominated
# conflict whose stationarity gap stays bounded away from zero. The same
# angular losses at smaller radius have steeper geometry (the angle gradient
# scales as 1/r), so a loss-level teleport can slide inward over the ridge
# crest, after which descent clears the track.
RAVINE_CONSTANTS = {
    "r_band": 2.70,        # radius of the tug-of-war lane
    "bank_center": 2.74,   # task-0 sigmoid bank (inward push above this)
    "ridge_center": 2.66,  # task-1 Gaussian ridge (outward push above crest)
    "bank_width": 0.04,
    "bank_height": 0.102,
    "ridge_width": 0.04,
    "ridge_height": 0.033,
    "drive": 1.0,          # task-0 angular pull
    "resist": 0.15,        # task-1 angular pull
    "phi_drive": -0.6,
    "phi_resist": 2.8,
    "angle_scale": 0.2,    # pseudo-Huber smoothing of the angular pulls
    "r_inner": 0.9,        # shared soft wall around the origin
    "wall_height": 0.12,
    "wall_width": 0.04,
}

# Documented adversarial starts: inside the tug lane, far from the Pareto arc.
RAVINE_ADVERSARIAL_INITS = [
    (2.70, 2.20),
    (2.70, 2.35),
    (2.70, 2.50),
    (2.70, 2.65),
    (2.70, 2.80),
]


def _polar_nodes(leaves):
    x = ad.component(leaves["theta"], 0)
    y = ad.component(leaves["theta"], 1)
    # 1e-18 smoothing keeps the radius gradient finite at the exact origin
    r = ad.sqrt(ad.add_const(ad.add(ad.square(x), ad.square(y)), 1e-18))
    phi = ad.atan2(y, x)
    return r, phi


def _pseudo_huber(u, s: float):
    return ad.add_const(ad.sqrt(ad.add_const(ad.square(u), s * s)), -s)


def make_ravine_toy(seed: int = 0) -> TaskSuite:
    """Nonconvex two-task landscape where mean-gradient descent stalls.

    The published constants in RAVINE_CONSTANTS are frozen fixtures; `seed`
    is accepted for interface uniformity but the landscape is deterministic.
    """
    del seed
    c = RAVINE_CONSTANTS
    layout = ParamLayout([("theta", (2, 1))])

    def shared_walls(r):
        # soft wall around the origin; it is also the sharpest shared feature,
        # which is what the teleport's sharpness scout locks onto
        return ad.scale(
            ad.softplus(ad.scale(ad.add_const(r, -c["r_inner"]), -1.0 / c["wall_width"])),
            c["wall_height"],
        )

    def build_driver(leaves, batch):
        r, phi = _polar_nodes(leaves)
        pull = ad.scale(_pseudo_huber(ad.add_const(phi, -c["phi_drive"]), c["angle_scale"]),
                        c["drive"])
        # outer sigmoid bank: rises past bank_center, pushes inward
        bank = ad.scale(
            ad.sigmoid(ad.scale(ad.add_const(r, -c["bank_center"]), 1.0 / c["bank_width"])),
            c["bank_height"],
        )
        return ad.add(ad.add(pull, bank), shared_walls(r))

    def build_resister(leaves, batch):
        r, phi = _polar_nodes(leaves)
        pull = ad.scale(_pseudo_huber(ad.add_const(phi, -c["phi_resist"]), c["angle_scale"]),
                        c["resist"])
        # Gaussian ridge: pushes outward above its crest, inward below it
        z = ad.scale(ad.add_const(r, -c["ridge_center"]), 1.0 / c["ridge_width"])
        ridge = ad.scale(ad.exp(ad.scale(ad.square(z), -0.5)), c["ridge_height"])
        return ad.add(ad.add(pull, ridge), shared_walls(r))

    r0, phi0 = RAVINE_ADVERSARIAL_INITS[2]
    init = np.array([r0 * np.cos(phi0), r0 * np.sin(phi0)])
    return TaskSuite(
        n_tasks=2,
        kind="analytic",
        metric_directions=[False, False],
        layout=layout,
        builders=[build_driver, build_resister],
        init_point=init,
        pareto_oracle=None,
        sample_box=(np.array([-3.0, 0.3]), np.array([3.0, 3.0])),
        lora_rank=1,
    )


def ravine_init_point(index: int) -> np.ndarray:
    r, phi = RAVINE_ADVERSARIAL_INITS[index]
    return np.array([r * np.cos(phi), r * np.sin(phi)])


# ---------------------------------------------------------------------------
# Synthetic multi-task regression
# ---------------------------------------------------------------------------


def make_synthetic_multitask(n_tasks: int, d_in: int, n: int, seed: int = 0,
                             teacher_width: int = 16) -> TaskSuite:
    """K regression tasks from hidden tanh teachers with imbalanced scales.

    Task i's targets are scaled by 10^(i mod 3), so any 3 consecutive tasks
    span two orders of magnitude; the imbalance is what makes small-norm
    tasks point against the mean gradient during training.
    """
    if n_tasks < 2:
        raise ValueError("K >= 2 required")
    if n < 10:
        raise ValueError("need at least 10 samples per task")
    rng = substream(seed, "synthetic-data")
    data = []
    for i in range(n_tasks):
        x = rng.normal(size=(n, d_in))
        w1 = rng.normal(size=(d_in, teacher_width)) / np.sqrt(d_in)
        w2 = rng.normal(size=(teacher_width, 1)) / np.sqrt(teacher_width)
        y = (10.0 ** (i % 3)) * np.tanh(x @ w1) @ w2
        data.append((x, y))
    return TaskSuite(
        n_tasks=n_tasks,
        kind="dataset",
        metric_directions=[False] * n_tasks,
        d_in=d_in,
        d_out=1,
        data=data,
        lora_rank=5,
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def load_csv_dataset(path, d_in: int, d_out: int, task_column: bool = False) -> TaskSuite:
    """Suite from a CSV file with columns x0..x{d_in-1}, y0..y{d_out-1}[, task].

    Comma-separated, UTF-8, '.' decimals, header row required. Rows group by
    the integer task column; without one the file is a single task, which is
    rejected (K >= 2 required). Parse errors name the 1-based line number.
    """
    expected = [f"x{i}" for i in range(d_in)] + [f"y{i}" for i in range(d_out)]
    if task_column:
        expected.append("task")
    rows_by_task: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError("empty file: header row required") from None
        header = [h.strip() for h in header]
        if header != expected:
            raise DatasetFormatError(
                f"line 1: header {header} does not match expected {expected}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DatasetFormatError(
                    f"line {lineno}: expected {len(expected)} cells, found {len(row)}"
                )
            try:
                values = [float(cell) for cell in row[: d_in + d_out]]
            except ValueError as exc:
                raise DatasetFormatError(f"line {lineno}: non-numeric cell ({exc})") from None
            if task_column:
                try:
                    task = int(row[-1])
                except ValueError:
                    raise DatasetFormatError(
                        f"line {lineno}: task column must be an integer"
                    ) from None
            else:
                task = 0
            rows_by_task.setdefault(task, []).append(values)

    tasks = sorted(rows_by_task)
    if len(tasks) < 2:
        raise DatasetFormatError(f"K >= 2 required, file provides {len(tasks)} task(s)")
    if tasks != list(range(len(tasks))):
        raise DatasetFormatError(f"task ids must be 0..K-1, found {tasks}")
    data = []
    for t in tasks:
        arr = np.asarray(rows_by_task[t], dtype=np.float64)
        data.append((arr[:, :d_in], arr[:, d_in:d_in + d_out]))
    return TaskSuite(
        n_tasks=len(tasks),
        kind="dataset",
        metric_directions=[False] * len(tasks),
        d_in=d_in,
        d_out=d_out,
        data=data,
        lora_rank=5,
    )
