"""Parameter updaters: SGD and Adam with one-shot history modulation.

After an accepted teleport the stored Adam moments describe a different point
on the loss surface. Instead of discarding them, the next step rescales both
decay factors by sigma = clamped cosine between the teleport displacement and
the pre-teleport update direction: sigma 1 keeps the history, sigma 0 drops
it, anything between interpolates. The modulation applies to exactly one
step, then sigma returns to 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conflict import cos_sim

__all__ = ["modulation_coefficient", "Adam", "Sgd"]


def modulation_coefficient(delta_theta: np.ndarray, prev_grad: np.ndarray) -> float:
    """Clamped cosine between the teleport jump and the prior update direction.

    Negative correlation is clamped to 0 (drop the history entirely) since a
    negative decay factor would corrupt the second moment.
    """
    return float(np.clip(cos_sim(delta_theta, prev_grad), 0.0, 1.0))


@dataclass
class Adam:
    """Standard Adam over a flat vector, with an armable one-shot modulation."""

    dim: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    v: np.ndarray = field(init=False)
    s: np.ndarray = field(init=False)
    step_count: int = field(init=False, default=0)
    sigma: float = field(init=False, default=1.0)
    pending: bool = field(init=False, default=False)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        self.v = np.zeros(self.dim)
        self.s = np.zeros(self.dim)

    def arm(self, sigma: float):
        """Arm the one-shot modulation consumed by the next step."""
        if self.pending:
            raise RuntimeError("modulation already armed and not yet consumed")
        if not 0.0 <= sigma <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")
        self.sigma = float(sigma)
        self.pending = True

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One update; bias correction keeps counting across teleports."""
        if params.shape != grad.shape or params.shape != (self.dim,):
            raise ValueError("parameter/gradient length mismatch")
        sigma = self.sigma if self.pending else 1.0
        b1, b2 = sigma * self.beta1, sigma * self.beta2
        self.v = b1 * self.v + (1.0 - b1) * grad
        self.s = b2 * self.s + (1.0 - b2) * grad * grad
        self.step_count += 1
        v_hat = self.v / (1.0 - self.beta1 ** self.step_count)
        s_hat = self.s / (1.0 - self.beta2 ** self.step_count)
        if self.pending:
            self.sigma = 1.0
            self.pending = False
        return params - self.lr * v_hat / (np.sqrt(s_hat) + self.eps)

    def state_copy(self):
        return (self.v.copy(), self.s.copy(), self.step_count, self.sigma, self.pending)


@dataclass
class Sgd:
    """Plain gradient descent, optionally at the 1/(Lambda*sqrt(T-1)) rate."""

    dim: int
    lr: float = 1e-2

    @staticmethod
    def decay_rate(smoothness: float, horizon: int) -> float:
        """Step size 1/(Lambda * sqrt(T-1)) for a horizon of T iterations."""
        if horizon < 2:
            raise ValueError("horizon must be at least 2")
        return 1.0 / (smoothness * np.sqrt(horizon - 1))

    def arm(self, sigma: float):
        """No history to modulate; accepted for interface uniformity."""

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if params.shape != grad.shape or params.shape != (self.dim,):
            raise ValueError("parameter/gradient length mismatch")
        return params - self.lr * grad
