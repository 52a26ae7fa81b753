"""Configuration-driven experiment runner and artifact emission.

One run = one config + one seed. Per step the runner samples one batch per
task, computes all task gradients, evaluates the conflict report, and either
teleports (when enabled and triggered) or combines the gradients and steps
the optimizer. Every random draw flows from the root seed through named
substreams, so identical configs produce byte-identical CSV outputs.
"""

from __future__ import annotations

import hashlib
import io
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Batch, substream
from .combiners import make_combiner
from .conflict import GradientMatrix, detect_dominated
from .metrics import stationarity_gap
from .models import SharedBackboneModel
from .optimizers import Adam, Sgd, modulation_coefficient
from .problems import (
    TaskSuite,
    load_csv_dataset,
    make_quadratic_pair,
    make_ravine_toy,
    make_synthetic_multitask,
    ravine_init_point,
)
from .teleport import LossSnapshot, TeleportConfig, should_teleport, teleport

__all__ = [
    "ConfigError",
    "RunConfig",
    "RunRecord",
    "parse_config_text",
    "load_config",
    "config_to_text",
    "run_experiment",
    "emit_outputs",
    "train_single_task_baselines",
    "step_seed",
]


class ConfigError(ValueError):
    """A config file failed validation; the message names the field."""


# ---------------------------------------------------------------------------
# Config format: "[section]" headers and "key = value" lines.
# Values: true/false, integers, floats, comma lists of numbers, bare strings.
# ---------------------------------------------------------------------------

_SCHEMA = {
    "suite": {"family", "a", "b", "scales", "init", "init_index", "tasks", "d_in",
              "d_out", "samples", "data_seed", "path", "task_column"},
    "model": {"backbone", "heads", "activation", "lora_rank"},
    "method": {"combiner", "c", "alpha"},
    "teleport": {"enabled", "gamma", "n_samples", "delta", "delta_scale", "rank",
                 "inner_steps", "inner_lr", "lt_tolerance", "lt_tolerance_scale",
                 "delayed_start_epochs", "max_teleports_per_epoch", "regime_cutoff",
                 "sharpness_form"},
    "optimizer": {"name", "lr", "beta1", "beta2", "eps", "lr_mode", "smoothness",
                  "halve_epoch"},
    "run": {"epochs", "steps_per_epoch", "batch_size", "seed", "train_baselines",
            "baseline_epochs"},
}

_FAMILIES = {"quadratic_pair", "ravine", "synthetic", "csv"}
_COMBINERS = {"ls", "pcgrad", "cagrad", "fairgrad"}


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in text:
        return [_parse_scalar(part) for part in text.split(",")]
    return _parse_scalar(text)


def _parse_scalar(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict:
    """Parse the strict key = value format into {section: {key: value}}."""
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line}'")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _SCHEMA[current]:
            raise ConfigError(f"line {lineno}: unknown key {current}.{key}")
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {current}.{key}")
        sections[current][key] = _parse_value(value)
    return sections


@dataclass
class RunConfig:
    suite_family: str
    suite_params: dict
    model_params: dict
    combiner: str
    combiner_params: dict
    teleport_enabled: bool
    teleport: TeleportConfig
    opt_name: str
    opt_params: dict
    epochs: int
    steps_per_epoch: int
    batch_size: int
    seed: int
    train_baselines: bool = False
    baseline_epochs: int = 0
    raw: dict = field(default_factory=dict)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


def _require(raw: dict, section: str, key: str):
    try:
        return raw[section][key]
    except KeyError:
        raise ConfigError(f"missing required field {section}.{key}") from None


def _positive(value, name, kind=float):
    try:
        value = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a {kind.__name__}") from None
    if value <= 0:
        raise ConfigError(f"{name} must be positive, got {value}")
    return value


def build_run_config(raw: dict) -> RunConfig:
    """Validate parsed sections into a RunConfig; errors name the field."""
    family = str(_require(raw, "suite", "family"))
    if family not in _FAMILIES:
        raise ConfigError(f"suite.family must be one of {sorted(_FAMILIES)}, got '{family}'")
    suite_params = {k: v for k, v in raw.get("suite", {}).items() if k != "family"}

    method = raw.get("method", {})
    combiner = str(method.get("combiner", "ls"))
    if combiner not in _COMBINERS:
        raise ConfigError(f"method.combiner must be one of {sorted(_COMBINERS)}")
    combiner_params = {k: v for k, v in method.items() if k != "combiner"}
    if "c" in combiner_params and float(combiner_params["c"]) < 0:
        raise ConfigError("method.c must be nonnegative")
    if "alpha" in combiner_params:
        _positive(combiner_params["alpha"], "method.alpha")

    tele = dict(raw.get("teleport", {}))
    enabled = bool(tele.pop("enabled", False))
    try:
        tcfg = TeleportConfig(**{
            {"n_samples": "n_samples"}.get(k, k): v for k, v in tele.items()
        })
    except TypeError as exc:
        raise ConfigError(f"teleport: {exc}") from None
    except ValueError as exc:
        key = str(exc).split()[0]
        raise ConfigError(f"teleport.{key}: {exc}") from None

    opt = dict(raw.get("optimizer", {}))
    opt_name = str(opt.pop("name", "adam"))
    if opt_name not in ("adam", "sgd"):
        raise ConfigError("optimizer.name must be 'adam' or 'sgd'")
    if "lr" in opt:
        _positive(opt["lr"], "optimizer.lr")
    lr_mode = str(opt.get("lr_mode", "fixed"))
    if lr_mode not in ("fixed", "decay", "halve"):
        raise ConfigError("optimizer.lr_mode must be fixed, decay, or halve")
    if lr_mode == "decay":
        if opt_name != "sgd":
            raise ConfigError("optimizer.lr_mode = decay requires optimizer.name = sgd")
        _positive(opt.get("smoothness", 0), "optimizer.smoothness")

    run = raw.get("run", {})
    if "seed" not in run:
        raise ConfigError("missing required field run.seed (no entropy-source defaults)")
    epochs = _positive(run.get("epochs", 1), "run.epochs", int)
    steps = _positive(run.get("steps_per_epoch", 100), "run.steps_per_epoch", int)
    batch = _positive(run.get("batch_size", 32), "run.batch_size", int)

    return RunConfig(
        suite_family=family,
        suite_params=suite_params,
        model_params=dict(raw.get("model", {})),
        combiner=combiner,
        combiner_params=combiner_params,
        teleport_enabled=enabled,
        teleport=tcfg,
        opt_name=opt_name,
        opt_params=opt,
        epochs=epochs,
        steps_per_epoch=steps,
        batch_size=batch,
        seed=int(run["seed"]),
        train_baselines=bool(run.get("train_baselines", False)),
        baseline_epochs=int(run.get("baseline_epochs", 0)),
        raw=raw,
    )


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    return build_run_config(parse_config_text(text))


def config_to_text(raw: dict) -> str:
    """Canonical echo of a parsed config (stable ordering for hashing)."""
    out = io.StringIO()
    for section in sorted(raw):
        out.write(f"[{section}]\n")
        for key in sorted(raw[section]):
            value = raw[section][key]
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, list):
                text = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            out.write(f"{key} = {text}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Suite and optimizer construction
# ---------------------------------------------------------------------------


def build_suite(cfg: RunConfig) -> TaskSuite:
    p = cfg.suite_params
    if cfg.suite_family == "quadratic_pair":
        return make_quadratic_pair(
            p.get("a", [0.0, 0.0]), p.get("b", [1.0, 0.0]),
            scale=p.get("scales", [1.0, 1.0]),
        )
    if cfg.suite_family == "ravine":
        suite = make_ravine_toy()
        if "init_index" in p:
            suite.init_point = ravine_init_point(int(p["init_index"]))
        if "init" in p:
            suite.init_point = np.asarray(p["init"], dtype=np.float64)
        return suite
    if cfg.suite_family == "synthetic":
        return make_synthetic_multitask(
            n_tasks=int(p.get("tasks", 8)),
            d_in=int(p.get("d_in", 16)),
            n=int(p.get("samples", 256)),
            seed=int(p.get("data_seed", cfg.seed)),
        )
    if cfg.suite_family == "csv":
        if "path" not in p:
            raise ConfigError("missing required field suite.path for csv suites")
        return load_csv_dataset(
            p["path"], d_in=int(p.get("d_in", 1)), d_out=int(p.get("d_out", 1)),
            task_column=bool(p.get("task_column", False)),
        )
    raise ConfigError(f"unknown suite.family '{cfg.suite_family}'")


def _make_optimizer(cfg: RunConfig, dim: int):
    p = cfg.opt_params
    if cfg.opt_name == "sgd":
        if p.get("lr_mode", "fixed") == "decay":
            lr = Sgd.decay_rate(float(p["smoothness"]), cfg.total_steps)
        else:
            lr = float(p.get("lr", 1e-2))
        return Sgd(dim=dim, lr=lr)
    return Adam(
        dim=dim,
        lr=float(p.get("lr", 1e-3)),
        beta1=float(p.get("beta1", 0.9)),
        beta2=float(p.get("beta2", 0.999)),
        eps=float(p.get("eps", 1e-8)),
    )


def step_seed(root_seed: int, global_step: int) -> int:
    """Documented per-step seed: reproducible by independent reference loops."""
    return (int(root_seed) * 100003 + int(global_step)) & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class StepRow:
    epoch: int
    step: int
    losses: np.ndarray
    dominated: bool
    trigger_count: int
    teleport_id: int | None
    grad_norm: float
    stat_gap: float


@dataclass
class TeleportRow:
    id: int
    epoch: int
    step: int
    accepted: bool
    lt_final: float
    lg_final: float
    grad_norm_before: float
    grad_norm_after: float
    sigma: float
    inner_steps: int
    pairwise_cos_before: np.ndarray | None = None
    pairwise_cos_after: np.ndarray | None = None


@dataclass
class RunRecord:
    config_text: str
    seed: int
    steps: list = field(default_factory=list)
    teleports: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    status: str = "ok"
    error: str = ""
    wall_time: float = 0.0
    final_backbone: np.ndarray | None = None


# ---------------------------------------------------------------------------
# The outer loop
# ---------------------------------------------------------------------------


def run_experiment(cfg: RunConfig, out_dir=None) -> RunRecord:
    """Execute one full run; optionally emit artifacts (also on failure)."""
    record = RunRecord(config_text=config_to_text(cfg.raw), seed=cfg.seed)
    started = time.perf_counter()
    try:
        _run_loop(cfg, record)
        record.status = "ok"
    except Exception as exc:
        record.status = "error"
        record.error = f"{type(exc).__name__}: {exc}"
        record.wall_time = time.perf_counter() - started
        if out_dir is not None:
            emit_outputs(record, out_dir)
        raise
    record.wall_time = time.perf_counter() - started
    if out_dir is not None:
        emit_outputs(record, out_dir)
    return record


def _run_loop(cfg: RunConfig, record: RunRecord):
    suite = build_suite(cfg)
    model = suite.build_model(cfg.model_params, seed=cfg.seed)
    k = model.n_tasks
    opt = _make_optimizer(cfg, model.backbone_layout.size)
    head_opts = [
        _make_optimizer(cfg, head.layout.size) for head in getattr(model, "heads", [])
    ]
    combiner = make_combiner(cfg.combiner, cfg.combiner_params)
    data_rng = substream(cfg.seed, "data")

    base_lr = getattr(opt, "lr", 0.0)
    halve_epoch = int(cfg.opt_params.get("halve_epoch", 0))
    lr_mode = str(cfg.opt_params.get("lr_mode", "fixed"))

    teleport_id = 0
    pending_sigma: float | None = None
    global_step = 0

    for epoch in range(cfg.epochs):
        teleports_this_epoch = 0
        if lr_mode == "halve" and halve_epoch > 0 and epoch == halve_epoch:
            opt.lr = base_lr * 0.5
            for ho in head_opts:
                ho.lr = ho.lr * 0.5
        for step in range(cfg.steps_per_epoch):
            batches = [suite.sample_batch(t, cfg.batch_size, data_rng) for t in range(k)]
            losses = np.empty(k)
            rows = []
            head_grads = []
            for t in range(k):
                loss, g_backbone, g_head = model.task_loss_and_grads(t, batches[t])
                losses[t] = loss
                rows.append(g_backbone)
                head_grads.append(g_head)
            g = GradientMatrix(np.stack(rows))
            report = detect_dominated(g, epoch=epoch, step=step)
            gap = stationarity_gap(g)
            seed_t = step_seed(cfg.seed, global_step)

            tele_row_id = None
            did_teleport = False
            if cfg.teleport_enabled and should_teleport(
                report, cfg.teleport, epoch, teleports_this_epoch
            ):
                snapshot = LossSnapshot(losses.copy(), batches)
                pre_grad = combiner(g, seed_t)
                outcome = teleport(model, snapshot, g, cfg.teleport, seed=seed_t,
                                   pre_grad=pre_grad)
                # frequency control caps teleport operations, accepted or not:
                # the cost being limited is the inner loop itself
                teleports_this_epoch += 1
                sigma = 1.0
                if outcome.accepted:
                    sigma = modulation_coefficient(outcome.delta_theta, pre_grad)
                    # Back-to-back teleports without an optimizer step between
                    # them compose their modulations multiplicatively.
                    pending_sigma = sigma if pending_sigma is None else pending_sigma * sigma
                    did_teleport = True
                record.teleports.append(TeleportRow(
                    id=teleport_id, epoch=epoch, step=step, accepted=outcome.accepted,
                    lt_final=outcome.final_lt, lg_final=outcome.final_lg,
                    grad_norm_before=outcome.grad_norm_before,
                    grad_norm_after=outcome.grad_norm_after,
                    sigma=sigma, inner_steps=outcome.inner_steps_used,
                    pairwise_cos_before=outcome.pairwise_cos_before,
                    pairwise_cos_after=outcome.pairwise_cos_after,
                ))
                tele_row_id = teleport_id
                teleport_id += 1

            if not did_teleport:
                direction = combiner(g, seed_t)
                if pending_sigma is not None:
                    opt.arm(pending_sigma)
                    pending_sigma = None
                model.backbone.values[:] = opt.step(model.backbone.values.copy(), direction)
                for t, ho in enumerate(head_opts):
                    model.heads[t].values[:] = ho.step(
                        model.heads[t].values.copy(), head_grads[t]
                    )

            record.steps.append(StepRow(
                epoch=epoch, step=step, losses=losses.copy(),
                dominated=report.dominated, trigger_count=report.many_task_count,
                teleport_id=tele_row_id,
                grad_norm=float(np.linalg.norm(g.mean)), stat_gap=gap,
            ))
            global_step += 1

    _finalize_metrics(cfg, suite, model, record)
    record.final_backbone = model.backbone.values.copy()


def _final_losses(suite: TaskSuite, model) -> np.ndarray:
    return np.array([
        model.task_loss(t, suite.full_batch(t)) for t in range(model.n_tasks)
    ])


def _finalize_metrics(cfg: RunConfig, suite: TaskSuite, model, record: RunRecord):
    k = model.n_tasks
    final = _final_losses(suite, model)
    metrics = {}
    for t in range(k):
        metrics[f"final_loss_{t}"] = float(final[t])
    metrics["final_mean_loss"] = float(final.mean())
    rows = [model.task_loss_and_grads(t, suite.full_batch(t))[1] for t in range(k)]
    metrics["final_stat_gap"] = stationarity_gap(GradientMatrix(np.stack(rows)))
    metrics["teleports_attempted"] = float(len(record.teleports))
    metrics["teleports_accepted"] = float(sum(1 for t in record.teleports if t.accepted))
    for epoch in range(cfg.epochs):
        rows_e = [s for s in record.steps if s.epoch == epoch]
        metrics[f"conflict_ratio_epoch_{epoch}"] = (
            sum(1 for s in rows_e if s.dominated) / len(rows_e) if rows_e else 0.0
        )
    if cfg.train_baselines:
        base = train_single_task_baselines(cfg, suite)
        for t in range(k):
            metrics[f"baseline_loss_{t}"] = float(base[t])
        from .metrics import delta_m

        metrics["delta_m_percent"] = delta_m(
            final, base, np.array(suite.metric_directions, dtype=bool)
        )
    record.final_metrics = metrics


def train_single_task_baselines(cfg: RunConfig, suite: TaskSuite) -> np.ndarray:
    """Independent per-task reference models trained with the run's budget.

    Each task gets its own backbone+head model (built as a 2-head model whose
    second head is simply never trained) and a plain single-task loop.
    """
    if suite.kind != "dataset":
        raise ConfigError("run.train_baselines requires a dataset suite")
    epochs = cfg.baseline_epochs or cfg.epochs
    finals = np.empty(suite.n_tasks)
    for task in range(suite.n_tasks):
        model = suite.build_model(cfg.model_params, seed=cfg.seed + 7919 * (task + 1))
        dim = model.backbone_layout.size + model.heads[0].layout.size
        opt = _make_optimizer(cfg, dim)
        rng = substream(cfg.seed, f"baseline-data-{task}")
        x, y = suite.data[task]
        for _epoch in range(epochs):
            for _step in range(cfg.steps_per_epoch):
                idx = rng.integers(0, x.shape[0], size=min(cfg.batch_size, x.shape[0]))
                batch = Batch(x[idx], y[idx], task_id=0)
                _, g_backbone, g_head = model.task_loss_and_grads(0, batch)
                flat = np.concatenate([model.backbone.values, model.heads[0].values])
                flat = opt.step(flat, np.concatenate([g_backbone, g_head]))
                m = model.backbone_layout.size
                model.backbone.values[:] = flat[:m]
                model.heads[0].values[:] = flat[m:]
        finals[task] = model.task_loss(0, Batch(x, y, task_id=0))
    return finals


# ---------------------------------------------------------------------------
# Artifact emission
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def _write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def emit_outputs(record: RunRecord, out_dir):
    """Write steps.csv, teleports.csv, metrics.csv, manifest, and plotdata/.

    Emission is deterministic: re-emitting the same record produces byte
    identical files (the manifest carries wall time and is exempt).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = record.steps[0].losses.size if record.steps else 0

    header = ["epoch", "step"] + [f"loss_{t}" for t in range(k)] + [
        "dominated", "trigger_count", "teleport_id", "grad_norm", "stat_gap"]
    _write_csv(out / "steps.csv", header, (
        [s.epoch, s.step] + [float(v) for v in s.losses]
        + [s.dominated, s.trigger_count, s.teleport_id, s.grad_norm, s.stat_gap]
        for s in record.steps
    ))

    _write_csv(out / "teleports.csv",
               ["id", "epoch", "step", "accepted", "Lt_final", "Lg_final",
                "grad_norm_before", "grad_norm_after", "sigma", "inner_steps"],
               ([t.id, t.epoch, t.step, t.accepted, t.lt_final, t.lg_final,
                 t.grad_norm_before, t.grad_norm_after, t.sigma, t.inner_steps]
                for t in record.teleports))

    _write_csv(out / "metrics.csv", ["metric", "value"],
               ([name, float(value)] for name, value in record.final_metrics.items()))

    digest = hashlib.sha256(record.config_text.encode("utf-8")).hexdigest()
    with open(out / "manifest.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("[manifest]\n")
        fh.write(f"status = {record.status}\n")
        if record.error:
            fh.write(f"error = {record.error}\n")
        fh.write(f"seed = {record.seed}\n")
        fh.write(f"config_sha256 = {digest}\n")
        fh.write(f"mtlopt_version = {__version__}\n")
        fh.write(f"numpy_version = {np.__version__}\n")
        fh.write(f"python_version = {platform.python_version()}\n")
        fh.write(f"wall_time_seconds = {record.wall_time:.3f}\n")
        fh.write("\n# config echo\n")
        for line in record.config_text.splitlines():
            fh.write(f"{line}\n")

    plot = out / "plotdata"
    plot.mkdir(exist_ok=True)
    _write_csv(plot / "loss_curves.csv",
               ["epoch", "step"] + [f"loss_{t}" for t in range(k)],
               ([s.epoch, s.step] + [float(v) for v in s.losses] for s in record.steps))
    cos_rows = []
    for t in record.teleports:
        if t.pairwise_cos_before is None or t.pairwise_cos_after is None:
            continue
        kk = t.pairwise_cos_before.shape[0]
        for i in range(kk):
            for j in range(i + 1, kk):
                cos_rows.append([t.id, i, j,
                                 float(t.pairwise_cos_before[i, j]),
                                 float(t.pairwise_cos_after[i, j])])
    _write_csv(plot / "cosine_hist.csv",
               ["teleport_id", "task_i", "task_j", "cos_before", "cos_after"], cos_rows)
    _write_csv(plot / "grad_norm_scatter.csv",
               ["teleport_id", "grad_norm_before", "grad_norm_after"],
               ([t.id, t.grad_norm_before, t.grad_norm_after]
                for t in record.teleports if t.accepted))
