import numpy as np
import pytest

from mtlopt import autodiff as ad
from mtlopt.models import SharedBackboneModel


def make_mlp(seed=0, d_in=3, widths=(6, 4), head=(2,), n_tasks=2, activation="tanh"):
    return SharedBackboneModel(
        d_in=d_in, backbone_widths=list(widths), head_widths=list(head),
        n_tasks=n_tasks, activation=activation, seed=seed,
    )


def make_batch(rng, n=5, d_in=3, d_out=2, task_id=0):
    return ad.Batch(rng.normal(size=(n, d_in)), rng.normal(size=(n, d_out)), task_id=task_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
