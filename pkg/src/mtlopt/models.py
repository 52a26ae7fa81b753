"""Shared-backbone models with task heads and low-rank adapter teleportation.

Two model flavors share one protocol: an MLP backbone with per-task heads
(`SharedBackboneModel`) and a bare parameter vector with analytic task losses
(`RawParamModel`, used by the toy landscapes). Both expose the shared
parameters as one flat vector, build per-task loss graphs through the
autodiff engine, and accept low-rank adapters on their 2-D weight slots.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import (
    Batch,
    LossProgram,
    NumericOverflowError,
    ParamLayout,
    ParamVector,
    ShapeMismatchError,
)

__all__ = [
    "AdapterError",
    "LoraAdapter",
    "SharedBackboneModel",
    "RawParamModel",
    "attach_lora",
    "forward_task_loss",
    "merge_lora",
    "save_checkpoint",
    "load_checkpoint",
]

_CHECKPOINT_MAGIC = b"MTLOPT01"


class AdapterError(RuntimeError):
    """Adapter misuse: wrong rank, already merged, or layout mismatch."""


# ---------------------------------------------------------------------------
# LoRA adapters
# ---------------------------------------------------------------------------


class LoraAdapter:
    """Per-layer low-rank pairs (A: r x n_in, B: n_out x r) on 2-D weight slots.

    The realized weight delta for a layer is ``scaling * (B @ A)``, expressed
    in (out, in) orientation; bias slots always receive a zero delta. A fresh
    adapter has B = 0, so attaching one never changes any loss value.
    """

    def __init__(self, layout: ParamLayout, rank: int, rng, scaling: float = 1.0):
        if rank < 1:
            raise AdapterError("adapter rank must be >= 1")
        self.layout = layout
        self.rank = int(rank)
        self.scaling = float(scaling)
        self.merged = False
        self.pairs = {}
        for name, shape in layout.entries:
            if len(shape) != 2:
                continue
            n_in, n_out = shape
            if rank > min(n_in, n_out):
                raise AdapterError(
                    f"rank {rank} exceeds min dimension of layer '{name}' with shape {shape}"
                )
            a = rng.normal(0.0, 0.02, size=(self.rank, n_in))
            b = np.zeros((n_out, self.rank))
            self.pairs[name] = (a, b)
        if not self.pairs:
            raise AdapterError("layout has no 2-D weight slots to adapt")

    def target_layers(self):
        return list(self.pairs)

    def delta(self, name: str) -> np.ndarray:
        """Weight delta for one layer in the layout's (in, out) orientation."""
        a, b = self.pairs[name]
        return self.scaling * (b @ a).T

    def flat_delta(self) -> np.ndarray:
        """Full delta aligned with the backbone layout; zero at bias slots."""
        arrays = {}
        for name, shape in self.layout.entries:
            if name in self.pairs:
                arrays[name] = self.delta(name)
            else:
                arrays[name] = np.zeros(shape)
        return self.layout.flatten(arrays)

    def trainable(self):
        """Flat views of all (A, B) factors, for the teleport inner loop."""
        return [arr for name in self.pairs for arr in self.pairs[name]]

    def make_leaves(self) -> dict:
        """Fresh graph leaves for every (A, B) factor pair."""
        return {
            name: (ad.leaf(a, name=f"{name}.A"), ad.leaf(b, name=f"{name}.B"))
            for name, (a, b) in self.pairs.items()
        }

    def weight_nodes(self, backbone: ParamVector, leaves: dict | None = None):
        """Graph nodes for effective weights W + scaling * (B A)^T.

        Backbone values enter as constants (frozen); only A and B are leaves.
        Passing `leaves` shares factors across several graphs (e.g. the
        center point and its sphere perturbations) so one backward pass sees
        them all. Returns (nodes, leaves).
        """
        if leaves is None:
            leaves = self.make_leaves()
        nodes = {}
        for name, shape in self.layout.entries:
            base = ad.constant(backbone.view(name), name=name)
            if name in self.pairs:
                a_node, b_node = leaves[name]
                delta = ad.matmul(ad.transpose(a_node), ad.transpose(b_node))
                if self.scaling != 1.0:
                    delta = ad.scale(delta, self.scaling)
                nodes[name] = ad.add(base, delta)
            else:
                nodes[name] = base
        return nodes, leaves


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


class SharedBackboneModel:
    """MLP backbone shared by K tasks, each with its own linear-or-MLP head.

    Backbone weights use (in, out) orientation; activations apply after every
    backbone layer. Heads apply activations on hidden layers and end linear.
    """

    def __init__(
        self,
        d_in: int,
        backbone_widths,
        head_widths,
        n_tasks: int,
        activation: str = "tanh",
        loss_kinds=None,
        lora_rank: int = 5,
        seed: int = 0,
    ):
        if n_tasks < 2:
            raise ValueError("shared-backbone models require at least 2 tasks")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        self.d_in = int(d_in)
        self.backbone_widths = [int(w) for w in backbone_widths]
        self.head_widths = [int(w) for w in head_widths]
        self.n_tasks = int(n_tasks)
        self.activation = activation
        self.loss_kinds = list(loss_kinds) if loss_kinds else ["mse"] * n_tasks
        if len(self.loss_kinds) != n_tasks:
            raise ValueError("one loss kind per task required")
        self.lora_rank = int(lora_rank)

        rng = ad.substream(seed, "model-init")
        self.backbone_layout, backbone_values = self._init_mlp(
            "backbone", [self.d_in] + self.backbone_widths, rng
        )
        self.backbone = ParamVector(backbone_values, self.backbone_layout)
        self.heads = []
        self.head_layouts = []
        rep_width = self.backbone_widths[-1]
        for t in range(n_tasks):
            layout, values = self._init_mlp(f"head{t}", [rep_width] + self.head_widths, rng)
            self.head_layouts.append(layout)
            self.heads.append(ParamVector(values, layout))

    @staticmethod
    def _init_mlp(prefix, widths, rng):
        entries, chunks = [], []
        for i in range(len(widths) - 1):
            n_in, n_out = widths[i], widths[i + 1]
            entries.append((f"{prefix}.{i}.W", (n_in, n_out)))
            chunks.append(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=n_in * n_out))
            entries.append((f"{prefix}.{i}.b", (n_out,)))
            chunks.append(np.zeros(n_out))
        layout = ParamLayout(entries)
        return layout, np.concatenate(chunks)

    # -- graph construction -------------------------------------------------

    def _backbone_trunk(self, weights: dict, batch: Batch):
        act = _ACTIVATIONS[self.activation]
        h = ad.constant(batch.inputs, name="inputs")
        for i in range(len(self.backbone_widths)):
            h = ad.bias_add(ad.matmul(h, weights[f"backbone.{i}.W"]), weights[f"backbone.{i}.b"])
            h = act(h)
        return h

    def _head_output(self, task: int, weights: dict, rep):
        act = _ACTIVATIONS[self.activation]
        h = rep
        n_layers = len(self.head_widths)
        for i in range(n_layers):
            h = ad.bias_add(ad.matmul(h, weights[f"head{task}.{i}.W"]), weights[f"head{task}.{i}.b"])
            if i < n_layers - 1:
                h = act(h)
        return h

    def build_task_loss(self, task: int, weights: dict, batch: Batch):
        """Wire the full loss graph for one task from named weight nodes."""
        out = self._head_output(task, weights, self._backbone_trunk(weights, batch))
        if self.loss_kinds[task] == "mse":
            return ad.mse(out, batch.targets)
        if self.loss_kinds[task] == "xent":
            return ad.softmax_cross_entropy(out, batch.targets)
        raise ValueError(f"unknown loss kind '{self.loss_kinds[task]}'")

    def _check_task(self, task: int):
        if not 0 <= task < self.n_tasks:
            raise IndexError(f"task {task} out of range [0, {self.n_tasks})")

    def task_layout(self, task: int) -> ParamLayout:
        self._check_task(task)
        return ParamLayout(
            list(self.backbone_layout.entries) + list(self.head_layouts[task].entries)
        )

    def task_params(self, task: int) -> ParamVector:
        layout = self.task_layout(task)
        return ParamVector(
            np.concatenate([self.backbone.values, self.heads[task].values]), layout
        )

    def task_program(self, task: int) -> LossProgram:
        self._check_task(task)
        return LossProgram(
            self.task_layout(task),
            lambda leaves, batch, _t=task: self.build_task_loss(_t, leaves, batch),
            name=f"task{task}",
        )

    # -- evaluation ----------------------------------------------------------

    def task_loss(self, task: int, batch: Batch, adapter: LoraAdapter | None = None) -> float:
        self._check_task(task)
        if batch.task_id != task:
            raise ValueError(f"batch belongs to task {batch.task_id}, not {task}")
        if adapter is None:
            return ad.eval_loss(self.task_program(task), self.task_params(task), batch)
        if adapter.merged:
            raise AdapterError("adapter was already merged")
        weights, _ = adapter.weight_nodes(self.backbone)
        for name, _shape in self.head_layouts[task].entries:
            weights[name] = ad.constant(self.heads[task].view(name), name=name)
        return float(self.build_task_loss(task, weights, batch).value)

    def task_loss_and_grads(self, task: int, batch: Batch):
        """Loss plus gradients split into (backbone part, head part)."""
        self._check_task(task)
        loss, flat = ad.eval_grad(self.task_program(task), self.task_params(task), batch)
        m = self.backbone_layout.size
        return loss, flat[:m], flat[m:]

    def adapter_loss_node(self, task: int, batch: Batch, adapter: LoraAdapter):
        """Loss graph with only adapter factors trainable (heads frozen)."""
        self._check_task(task)
        weights, leaves = adapter.weight_nodes(self.backbone)
        for name, _shape in self.head_layouts[task].entries:
            weights[name] = ad.constant(self.heads[task].view(name), name=name)
        return self.build_task_loss(task, weights, batch), leaves


class RawParamModel:
    """Bare shared parameter vector with analytic per-task loss builders.

    Used by the toy landscapes, where the whole model is one small weight
    matrix and there are no task heads.
    """

    def __init__(self, layout: ParamLayout, values: np.ndarray, builders, lora_rank: int = 1):
        if len(builders) < 2:
            raise ValueError("at least 2 tasks required")
        self.backbone_layout = layout
        self.backbone = ParamVector(np.asarray(values, dtype=np.float64).copy(), layout)
        self.builders = list(builders)
        self.n_tasks = len(builders)
        self.lora_rank = int(lora_rank)
        self.heads = []

    def build_task_loss(self, task: int, weights: dict, batch: Batch):
        return self.builders[task](weights, batch)

    def _check_task(self, task: int):
        if not 0 <= task < self.n_tasks:
            raise IndexError(f"task {task} out of range [0, {self.n_tasks})")

    def task_layout(self, task: int) -> ParamLayout:
        self._check_task(task)
        return self.backbone_layout

    def task_params(self, task: int) -> ParamVector:
        self._check_task(task)
        return ParamVector(self.backbone.values.copy(), self.backbone_layout)

    def task_program(self, task: int) -> LossProgram:
        self._check_task(task)
        return LossProgram(
            self.backbone_layout,
            lambda leaves, batch, _t=task: self.builders[_t](leaves, batch),
            name=f"task{task}",
        )

    def task_loss(self, task: int, batch: Batch, adapter: LoraAdapter | None = None) -> float:
        self._check_task(task)
        if adapter is None:
            return ad.eval_loss(self.task_program(task), self.task_params(task), batch)
        if adapter.merged:
            raise AdapterError("adapter was already merged")
        weights, _ = adapter.weight_nodes(self.backbone)
        return float(self.builders[task](weights, batch).value)

    def task_loss_and_grads(self, task: int, batch: Batch):
        loss, flat = ad.eval_grad(self.task_program(task), self.task_params(task), batch)
        return loss, flat, np.zeros(0)

    def adapter_loss_node(self, task: int, batch: Batch, adapter: LoraAdapter):
        weights, leaves = adapter.weight_nodes(self.backbone)
        return self.builders[task](weights, batch), leaves


# ---------------------------------------------------------------------------
# Module-level operations (thin wrappers with the documented contracts)
# ---------------------------------------------------------------------------


def forward_task_loss(model, task: int, batch: Batch, adapter: LoraAdapter | None = None) -> float:
    """Task loss at theta + flatten(adapter) when an adapter is present."""
    return model.task_loss(task, batch, adapter=adapter)


def attach_lora(model, rank: int | None = None, seed: int = 0) -> LoraAdapter:
    """Fresh zero-delta adapter on the model's backbone weight matrices."""
    rank = model.lora_rank if rank is None else int(rank)
    rng = ad.substream(seed, "lora-init")
    return LoraAdapter(model.backbone_layout, rank, rng)


def merge_lora(model, adapter: LoraAdapter) -> np.ndarray:
    """Add the adapter delta into the backbone and consume the adapter.

    Returns the flat delta (zero at bias coordinates). Merging twice is an
    error; the adapter must be discarded after this call.
    """
    if adapter.merged:
        raise AdapterError("adapter was already merged")
    if adapter.layout != model.backbone_layout:
        raise AdapterError("adapter layout does not match the model backbone")
    delta = adapter.flat_delta()
    model.backbone.values += delta
    adapter.merged = True
    return delta


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: SharedBackboneModel, path):
    """Binary checkpoint: magic, JSON header, raw little-endian float64 blocks."""
    header = {
        "kind": "shared_backbone",
        "d_in": model.d_in,
        "backbone_widths": model.backbone_widths,
        "head_widths": model.head_widths,
        "n_tasks": model.n_tasks,
        "activation": model.activation,
        "loss_kinds": model.loss_kinds,
        "lora_rank": model.lora_rank,
        "backbone_layout": [[n, list(s)] for n, s in model.backbone_layout.entries],
        "head_layouts": [
            [[n, list(s)] for n, s in layout.entries] for layout in model.head_layouts
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(model.backbone.values.astype("<f8").tobytes())
        for head in model.heads:
            fh.write(head.values.astype("<f8").tobytes())


def load_checkpoint(path) -> SharedBackboneModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        model = SharedBackboneModel(
            d_in=header["d_in"],
            backbone_widths=header["backbone_widths"],
            head_widths=header["head_widths"],
            n_tasks=header["n_tasks"],
            activation=header["activation"],
            loss_kinds=header["loss_kinds"],
            lora_rank=header["lora_rank"],
        )
        expected = [[n, list(s)] for n, s in model.backbone_layout.entries]
        if header["backbone_layout"] != expected:
            raise ValueError("checkpoint layout does not match rebuilt architecture")
        raw = fh.read(model.backbone_layout.size * 8)
        model.backbone.values[:] = np.frombuffer(raw, dtype="<f8")
        for head in model.heads:
            raw = fh.read(head.layout.size * 8)
            head.values[:] = np.frombuffer(raw, dtype="<f8")
    return model
