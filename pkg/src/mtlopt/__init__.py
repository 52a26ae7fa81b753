"""Multi-task optimization toolkit with conflict-triggered loss-level teleportation."""

__version__ = "0.1.0"

from .autodiff import Batch, ParamLayout, ParamVector
from .conflict import GradientMatrix, cos_sim, detect_dominated, many_task_trigger
from .combiners import (
    combine_cagrad,
    combine_fairgrad,
    combine_ls,
    combine_pcgrad,
    min_norm_weights,
)
from .metrics import delta_m, mean_rank, stationarity_gap
from .models import LoraAdapter, RawParamModel, SharedBackboneModel, attach_lora, merge_lora
from .optimizers import Adam, Sgd, modulation_coefficient
from .problems import (
    load_csv_dataset,
    make_quadratic_pair,
    make_ravine_toy,
    make_synthetic_multitask,
)
from .teleport import (
    BalanceWeights,
    LossSnapshot,
    TeleportConfig,
    TeleportOutcome,
    balance_weights,
    estimate_sharpness,
    loss_fluctuation,
    should_teleport,
    take_snapshot,
    teleport,
)

__all__ = [
    "Batch",
    "ParamLayout",
    "ParamVector",
    "GradientMatrix",
    "cos_sim",
    "detect_dominated",
    "many_task_trigger",
    "combine_ls",
    "combine_pcgrad",
    "combine_cagrad",
    "combine_fairgrad",
    "min_norm_weights",
    "delta_m",
    "mean_rank",
    "stationarity_gap",
    "LoraAdapter",
    "SharedBackboneModel",
    "RawParamModel",
    "attach_lora",
    "merge_lora",
    "Adam",
    "Sgd",
    "modulation_coefficient",
    "make_quadratic_pair",
    "make_ravine_toy",
    "make_synthetic_multitask",
    "load_csv_dataset",
    "TeleportConfig",
    "TeleportOutcome",
    "LossSnapshot",
    "BalanceWeights",
    "balance_weights",
    "estimate_sharpness",
    "loss_fluctuation",
    "should_teleport",
    "take_snapshot",
    "teleport",
]
