"""Gradient-combination strategies: one update direction from K task gradients.

Implements mean-gradient scalarization, projection surgery (PCGrad), the
conflict-averse dual (CAGrad), the fairness fixed-point system (FairGrad),
and the min-norm simplex solver used by the Pareto-stationarity metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import substream
from .conflict import GradientMatrix

__all__ = [
    "CombinerWeights",
    "SolverError",
    "project_simplex",
    "project_conflict",
    "combine_ls",
    "combine_pcgrad",
    "combine_cagrad",
    "combine_fairgrad",
    "min_norm_weights",
    "make_combiner",
]


class SolverError(RuntimeError):
    """An iterative solver failed to reach its required residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass
class CombinerWeights:
    """Nonnegative task weights, optionally constrained to the simplex."""

    omega: np.ndarray
    on_simplex: bool = True

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if (self.omega < -1e-12).any():
            raise ValueError("combiner weights must be nonnegative")
        if self.on_simplex and abs(self.omega.sum() - 1.0) > 1e-9:
            raise ValueError("weights declared on the simplex must sum to 1")


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    rho = idx[cond][-1]
    theta = css[cond][-1] / rho
    return np.maximum(v - theta, 0.0)


# ---------------------------------------------------------------------------
# Linear scalarization and PCGrad
# ---------------------------------------------------------------------------


def combine_ls(g: GradientMatrix) -> np.ndarray:
    """Mean of the task gradients."""
    return g.mean.copy()


def project_conflict(gi: np.ndarray, gj: np.ndarray) -> np.ndarray:
    """Remove from gi its conflicting component along gj (if any)."""
    denom = float(np.dot(gj, gj))
    if denom < 1e-24:
        return gi.copy()
    dot = float(np.dot(gi, gj))
    if dot >= 0.0:
        return gi.copy()
    return gi - (dot / denom) * gj


def combine_pcgrad(g: GradientMatrix, seed: int = 0) -> np.ndarray:
    """Gradient surgery: project each row against the others it conflicts with.

    Each task's gradient is surgically adjusted against the ORIGINAL gradients
    of the other tasks, visited in a seed-shuffled order; the combined update
    is the mean of the adjusted rows.
    """
    rng = substream(seed, "pcgrad-shuffle")
    k = g.n_tasks
    adjusted = np.empty_like(g.rows)
    for i in range(k):
        order = [j for j in range(k) if j != i]
        rng.shuffle(order)
        gi = g.rows[i].copy()
        for j in order:
            gi = project_conflict(gi, g.rows[j])
        adjusted[i] = gi
    return adjusted.mean(axis=0)


# ---------------------------------------------------------------------------
# CAGrad
# ---------------------------------------------------------------------------


def cagrad_dual_objective(omega: np.ndarray, gram: np.ndarray, gram_g0: np.ndarray,
                          sqrt_phi: float) -> float:
    """Dual value F(w) = <g_w, g_0> + sqrt(phi) * ||g_w||, via the Gram matrix."""
    quad = float(omega @ gram @ omega)
    return float(omega @ gram_g0) + sqrt_phi * np.sqrt(max(quad, 0.0))


def combine_cagrad(g: GradientMatrix, c: float = 0.5, iters: int = 1000,
                   return_weights: bool = False):
    """Conflict-averse direction: stay within c*||g0|| of the mean gradient.

    Solves the dual min_w F(w) over the simplex by projected gradient descent
    (step 0.5/L from the Gram spectral bound, best iterate kept), then returns
    d = g0 + (sqrt(phi)/||g_w||) g_w. With return_weights, also returns the
    dual weights and achieved dual value for oracle cross-checks.
    """
    if c < 0:
        raise ValueError("cagrad coefficient c must be nonnegative")
    g0 = g.mean
    if c == 0.0:
        if return_weights:
            omega0 = np.full(g.n_tasks, 1.0 / g.n_tasks)
            return g0.copy(), CombinerWeights(omega0), float(omega0 @ (g.rows @ g0))
        return g0.copy()
    gram = g.gram()
    gram_g0 = g.rows @ g0
    phi = c * c * float(g0 @ g0)
    sqrt_phi = np.sqrt(phi)
    lam_max = max(float(np.linalg.eigvalsh(gram)[-1]), 1e-12)

    k = g.n_tasks
    omega = np.full(k, 1.0 / k)
    best_omega, best_val = omega.copy(), cagrad_dual_objective(omega, gram, gram_g0, sqrt_phi)
    for _ in range(iters):
        gw_quad = float(omega @ gram @ omega)
        gw_norm = np.sqrt(max(gw_quad, 0.0))
        if gw_norm > 1e-12:
            grad = gram_g0 + sqrt_phi * (gram @ omega) / gw_norm
            lip = lam_max * (1.0 + sqrt_phi / gw_norm)
        else:
            grad = gram_g0
            lip = lam_max
        omega = project_simplex(omega - (0.5 / lip) * grad)
        val = cagrad_dual_objective(omega, gram, gram_g0, sqrt_phi)
        if val < best_val:
            best_val, best_omega = val, omega.copy()

    g_w = g.rows.T @ best_omega
    norm = float(np.linalg.norm(g_w))
    direction = g0.copy() if norm < 1e-12 else g0 + (sqrt_phi / norm) * g_w
    if return_weights:
        return direction, CombinerWeights(best_omega), best_val
    return direction


# ---------------------------------------------------------------------------
# FairGrad
# ---------------------------------------------------------------------------


def fairgrad_residual(omega: np.ndarray, gram: np.ndarray, alpha: float) -> np.ndarray:
    return gram @ omega - omega ** (-1.0 / alpha)


def fairgrad_weights(g: GradientMatrix, alpha: float = 2.0, max_iters: int = 200,
                     tol: float = 1e-8) -> np.ndarray:
    """Solve Gram w = w^(-1/alpha) elementwise for w > 0.

    Log-parameterizes w = exp(u) (so positivity is structural) and drives the
    residual down by damped Gauss-Newton with a backtracking line search on
    the squared residual; plain gradient descent stalls when task gradient
    norms span several orders of magnitude.
    """
    if alpha <= 0:
        raise ValueError("fairgrad alpha must be positive")
    gram = g.gram()
    if (np.diag(gram) <= 0.0).any():
        raise SolverError("fairgrad requires nonzero task gradients (zero-norm row)")
    k = g.n_tasks
    # scale-equivariant start: w0 ~ diag^(-alpha/(alpha+1)) solves the
    # decoupled system exactly and is the right magnitude in general
    u = -np.log(np.diag(gram)) * (alpha / (alpha + 1.0))

    def residual_at(u):
        w = np.exp(u)
        return gram @ w - np.exp(-u / alpha), w

    r, w = residual_at(u)
    h = float(r @ r)
    for _ in range(max_iters):
        if float(np.abs(r).max()) <= tol:
            break
        rhs = np.exp(-u / alpha)
        jac = gram * w[None, :] + np.diag(rhs / alpha)
        try:
            direction = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            direction = -2.0 * (w * (gram @ r) + (rhs / alpha) * r)
        step = 1.0
        for _bt in range(60):
            u_new = u + step * direction
            r_new, w_new = residual_at(u_new)
            h_new = float(r_new @ r_new)
            if h_new < h:
                break
            step *= 0.5
        else:
            raise SolverError("fairgrad line search failed",
                              residual=float(np.abs(r).max()))
        u, r, w, h = u_new, r_new, w_new, h_new
    residual = float(np.abs(r).max())
    if residual > tol:
        raise SolverError(
            f"fairgrad did not converge: residual {residual:.3e} > {tol:.1e}",
            residual=residual,
        )
    return np.exp(u)


def combine_fairgrad(g: GradientMatrix, alpha: float = 2.0) -> np.ndarray:
    """Weighted combination using the fairness fixed-point weights."""
    omega = fairgrad_weights(g, alpha=alpha)
    return g.rows.T @ omega


# ---------------------------------------------------------------------------
# Min-norm point (Frank-Wolfe with away steps)
# ---------------------------------------------------------------------------


def min_norm_weights(g: GradientMatrix, max_iters: int = 500, gap_tol: float = 1e-12) -> CombinerWeights:
    """Simplex weights minimizing ||sum_i w_i g_i||^2.

    Frank-Wolfe with away steps and exact line search on the quadratic;
    stops at duality gap <= gap_tol.
    """
    gram = g.gram()
    k = g.n_tasks
    omega = np.full(k, 1.0 / k)
    for _ in range(max_iters):
        grad = 2.0 * gram @ omega
        s = int(np.argmin(grad))
        active = np.flatnonzero(omega > 1e-15)
        v = int(active[np.argmax(grad[active])])
        gap = float(grad @ omega - grad[s])
        if gap <= gap_tol:
            break
        d_fw = -omega.copy()
        d_fw[s] += 1.0
        d_aw = omega.copy()
        d_aw[v] -= 1.0
        if float(-grad @ d_fw) >= float(-grad @ d_aw):
            d, gamma_max = d_fw, 1.0
        else:
            alpha_v = omega[v]
            if alpha_v >= 1.0 - 1e-15:
                d, gamma_max = d_fw, 1.0
            else:
                d, gamma_max = d_aw, alpha_v / (1.0 - alpha_v)
        curv = float(d @ gram @ d)
        if curv <= 1e-18:
            gamma = gamma_max
        else:
            gamma = float(np.clip(-(grad @ d) / (2.0 * curv), 0.0, gamma_max))
        if gamma <= 0.0:
            break
        omega = omega + gamma * d
        omega = np.maximum(omega, 0.0)
        omega /= omega.sum()
    return CombinerWeights(omega, on_simplex=True)


def min_norm_point(g: GradientMatrix) -> np.ndarray:
    return g.rows.T @ min_norm_weights(g).omega


# ---------------------------------------------------------------------------
# Dispatch for the harness
# ---------------------------------------------------------------------------


def make_combiner(name: str, params: dict | None = None):
    """Build a (G, step_seed) -> direction callable for a named strategy."""
    params = dict(params or {})
    if name == "ls":
        return lambda g, seed: combine_ls(g)
    if name == "pcgrad":
        return lambda g, seed: combine_pcgrad(g, seed=seed)
    if name == "cagrad":
        c = float(params.get("c", 0.5))
        return lambda g, seed: combine_cagrad(g, c=c)
    if name == "fairgrad":
        alpha = float(params.get("alpha", 2.0))
        return lambda g, seed: combine_fairgrad(g, alpha=alpha)
    raise ValueError(f"unknown combiner '{name}'")
