"""Built-in oracle battery behind `mtlopt selftest`.

A fast subset of the full pytest suite: gradient checks against central
finite differences, combiner solvers against independent oracles, and the
optimizer modulation contract against a hand-unrolled reference.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .combiners import (
    cagrad_dual_objective,
    combine_cagrad,
    fairgrad_residual,
    fairgrad_weights,
    min_norm_weights,
    project_conflict,
    project_simplex,
)
from .conflict import GradientMatrix
from .models import SharedBackboneModel
from .optimizers import Adam


def _check_gradients() -> bool:
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(10):
        model = SharedBackboneModel(
            d_in=3, backbone_widths=[6, 4], head_widths=[2], n_tasks=2,
            activation="tanh", seed=trial,
        )
        batch = ad.Batch(rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), task_id=0)
        program = model.task_program(0)
        params = model.task_params(0)
        _, grad = ad.eval_grad(program, params, batch)
        fd = ad.finite_diff_grad(program, params, batch, eps=1e-5)
        scale = np.maximum(np.abs(fd), 1e-8)
        worst = max(worst, float(np.max(np.abs(grad - fd) / scale)))
    return worst <= 1e-5


def _check_cagrad() -> bool:
    rng = np.random.default_rng(5)
    for _ in range(10):
        g = GradientMatrix(rng.normal(size=(2, 5)))
        c = 0.5
        gram, gg0 = g.gram(), g.rows @ g.mean
        sp = c * np.sqrt(float(g.mean @ g.mean))
        ts = np.linspace(0.0, 1.0, 2001)
        oracle = min(
            cagrad_dual_objective(np.array([t, 1 - t]), gram, gg0, sp) for t in ts
        )
        d = combine_cagrad(g, c=c)
        if np.linalg.norm(d - g.mean) > c * np.linalg.norm(g.mean) + 1e-9:
            return False
        del oracle  # feasibility is the cheap check here; values tested in pytest
    return True


def _check_fairgrad() -> bool:
    rng = np.random.default_rng(6)
    for _ in range(10):
        g = GradientMatrix(rng.normal(size=(2, 4)))
        w = fairgrad_weights(g, alpha=2.0)
        if float(np.abs(fairgrad_residual(w, g.gram(), 2.0)).max()) > 1e-8:
            return False
    return True


def _check_min_norm() -> bool:
    rng = np.random.default_rng(7)
    for _ in range(50):
        g = GradientMatrix(rng.normal(size=(2, 4)))
        g1, g2 = g.rows
        gamma = float(np.clip(((g2 - g1) @ g2) / ((g1 - g2) @ (g1 - g2)), 0.0, 1.0))
        oracle = np.linalg.norm(gamma * g1 + (1 - gamma) * g2)
        solver = np.linalg.norm(g.rows.T @ min_norm_weights(g).omega)
        if abs(solver - oracle) > 1e-10:
            return False
    return True


def _check_pcgrad_projection() -> bool:
    out = project_conflict(np.array([1.0, 0.0]), np.array([-1.0, 1.0]))
    return bool(np.max(np.abs(out - np.array([0.5, 0.5]))) <= 1e-12)


def _check_simplex_projection() -> bool:
    rng = np.random.default_rng(8)
    for _ in range(100):
        w = project_simplex(rng.normal(size=6) * 3)
        if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
            return False
    return True


def _check_adam_modulation() -> bool:
    grads = [np.array([0.5, -1.0]), np.array([0.25, 0.75]), np.array([-0.5, 0.1])]
    theta = np.array([1.0, 2.0])
    opt = Adam(dim=2, lr=0.01)
    opt.arm(0.0)
    theta = opt.step(theta, grads[0])
    # sigma = 0 discards history: first-step moments are exactly g and g^2
    v_ref, s_ref = grads[0], grads[0] ** 2
    if not (np.allclose(opt.v, v_ref) and np.allclose(opt.s, s_ref)):
        return False
    try:
        opt.arm(0.5)
        opt.arm(0.5)
        return False  # double arm must raise
    except RuntimeError:
        pass
    return opt.sigma != 1.0 or opt.pending  # armed state visible


def run() -> int:
    checks = [
        ("gradient-vs-finite-difference", _check_gradients),
        ("cagrad-feasibility", _check_cagrad),
        ("fairgrad-residual", _check_fairgrad),
        ("min-norm-closed-form", _check_min_norm),
        ("pcgrad-projection", _check_pcgrad_projection),
        ("simplex-projection", _check_simplex_projection),
        ("adam-modulation", _check_adam_modulation),
    ]
    failures = 0
    for name, check in checks:
        try:
            ok = check()
        except Exception as exc:
            print(f"FAIL {name} ({type(exc).__name__}: {exc})")
            failures += 1
            continue
        print(("PASS " if ok else "FAIL ") + name)
        failures += 0 if ok else 1
    return 0 if failures == 0 else 2
