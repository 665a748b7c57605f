"""The cluster-regularized objective, its gradient and a reference solver.

For clients ``i`` in cluster ``j``::

    F(Theta) = sum_i f_i(theta_i)
             + sum_j (1 - alpha_j) psi_j(Theta_j) + phi(Theta)
    psi_j    = 1/2 sum_{i in I_j} gamma_i ||theta_i - tbar_j||^2
    phi      = 1/2 sum_j alpha_j sum_{i in I_j} gamma_i ||theta_i - tbar||^2

with ``tbar_j`` the gamma-weighted cluster mean and ``tbar`` the
(alpha*gamma)-weighted network mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigError, ConvergenceError, SolverError
from .network import LossBatch, NetworkTopology, PenaltyConfig, as_batch


@dataclass(frozen=True)
class ObjectiveValue:
    total: float
    per_client_loss: float
    cluster_reg: float
    global_reg: float


@dataclass(frozen=True)
class SmoothnessProfile:
    """Constants the tuners work from.

    ``C1 = max alpha_j gamma_i``, ``C2 = max (1 - alpha_j) gamma_i``; ``L_f``
    is the largest client-loss smoothness, ``L_tilde`` the largest component
    smoothness and ``mu`` the smallest client strong convexity.
    """

    C1: float
    C2: float
    L_f: float
    mu: float
    L_tilde: float | None = None
    gamma_max: float | None = None

    def __post_init__(self):
        if self.C1 < 0 or self.C2 < 0:
            raise ConfigError("C1 and C2 must be non-negative")
        if self.L_tilde is None:
            object.__setattr__(self, "L_tilde", self.L_f)
        if self.gamma_max is None:
            object.__setattr__(self, "gamma_max", max(self.C1, self.C2))

    @property
    def L_F(self) -> float:
        return self.L_tilde + self.gamma_max


def _check_stack(stack: np.ndarray, topo: NetworkTopology, losses: LossBatch | None = None):
    stack = np.asarray(stack, dtype=float)
    if stack.ndim != 2 or stack.shape[0] != topo.n:
        raise ConfigError(f"parameter stack must have shape (n={topo.n}, d), got {stack.shape}")
    if losses is not None and stack.shape[1] != losses.d:
        raise ConfigError(f"stack dimension {stack.shape[1]} does not match loss dimension {losses.d}")
    return stack


def _averages(stack, topo, pen):
    """Cluster and network averages; zero where the weights vanish (their terms do too)."""
    g = pen.gamma
    totals = np.bincount(topo.cluster_of, weights=g, minlength=topo.k)
    sums = np.zeros((topo.k, stack.shape[1]))
    np.add.at(sums, topo.cluster_of, g[:, None] * stack)
    safe = np.where(totals > 0, totals, 1.0)
    cbar = sums / safe[:, None]
    w = pen.client_alpha(topo) * g
    gtot = w.sum()
    gbar = w @ stack / gtot if gtot > 0 else np.zeros(stack.shape[1])
    return cbar, gbar


def regularizer_grads(stack, topo: NetworkTopology, pen: PenaltyConfig):
    """Per-client gradients of ``psi_j`` (unscaled by ``1 - alpha_j``) and of ``phi``."""
    stack = _check_stack(stack, topo)
    cbar, gbar = _averages(stack, topo, pen)
    g = pen.gamma[:, None]
    a = pen.client_alpha(topo)[:, None]
    grad_psi = g * (stack - cbar[topo.cluster_of])
    grad_phi = a * g * (stack - gbar)
    return grad_psi, grad_phi


def regularizer_values(stack, topo: NetworkTopology, pen: PenaltyConfig):
    """``(psi_1..psi_k, phi)``."""
    stack = _check_stack(stack, topo)
    cbar, gbar = _averages(stack, topo, pen)
    g = pen.gamma
    a = pen.client_alpha(topo)
    dc = np.sum((stack - cbar[topo.cluster_of]) ** 2, axis=1)
    dg = np.sum((stack - gbar) ** 2, axis=1)
    psi = 0.5 * np.bincount(topo.cluster_of, weights=g * dc, minlength=topo.k)
    phi = 0.5 * float(np.sum(a * g * dg))
    return psi, phi


def eval_objective(stack, topo: NetworkTopology, pen: PenaltyConfig, losses) -> ObjectiveValue:
    losses = as_batch(losses)
    stack = _check_stack(stack, topo, losses)
    psi, phi = regularizer_values(stack, topo, pen)
    loss = losses.value(stack)
    creg = float(np.sum((1.0 - pen.alpha) * psi))
    return ObjectiveValue(total=loss + creg + phi, per_client_loss=loss, cluster_reg=creg, global_reg=phi)


def objective_value(stack, topo, pen, losses) -> float:
    return eval_objective(stack, topo, pen, losses).total


def grad_objective(stack, topo: NetworkTopology, pen: PenaltyConfig, losses) -> np.ndarray:
    losses = as_batch(losses)
    stack = _check_stack(stack, topo, losses)
    grad_psi, grad_phi = regularizer_grads(stack, topo, pen)
    a = pen.client_alpha(topo)[:, None]
    return losses.grad(stack) + (1.0 - a) * grad_psi + grad_phi


# --------------------------------------------------------------------------
# multi-task form


def eval_mtl_objective(stack, w, wbar, topo: NetworkTopology, pen: PenaltyConfig, losses) -> float:
    """``sum_j [sum_i f_i + gamma_i/2 ||theta_i - w_j||^2] + lambda_j/2 ||w_j - wbar||^2``."""
    if pen.lam is None:
        raise ConfigError("the multi-task objective needs per-cluster lambda")
    losses = as_batch(losses)
    stack = _check_stack(stack, topo, losses)
    w = np.asarray(w, dtype=float).reshape(topo.k, -1)
    wbar = np.asarray(wbar, dtype=float).ravel()
    dev = np.sum((stack - w[topo.cluster_of]) ** 2, axis=1)
    top = np.sum((w - wbar) ** 2, axis=1)
    return losses.value(stack) + 0.5 * float(pen.gamma @ dev) + 0.5 * float(pen.lam @ top)


def mtl_optimal_centers(stack, topo: NetworkTopology, pen: PenaltyConfig):
    """Minimizing ``(w, wbar)`` of the multi-task objective for fixed ``Theta``.

    ``w_j = alpha_j tbar + (1 - alpha_j) tbar_j`` and ``wbar = tbar``.
    """
    stack = _check_stack(stack, topo)
    cbar, gbar = _averages(stack, topo, pen)
    a = pen.alpha[:, None]
    return a * gbar + (1 - a) * cbar, gbar


# --------------------------------------------------------------------------
# curvature


def cluster_hessian_factor(topo: NetworkTopology, pen: PenaltyConfig, j: int) -> np.ndarray:
    """``H_j`` with ``Hess psi_j = H_j (x) I_d``: ``diag(gamma) - gamma gamma^T / sum gamma``."""
    topo.check_cluster(j)
    g = pen.gamma[list(topo.members[j])]
    total = g.sum()
    H = np.diag(g)
    if total > 0:
        H -= np.outer(g, g) / total
    return H


def global_hessian_factor(topo: NetworkTopology, pen: PenaltyConfig) -> np.ndarray:
    """n x n factor of the Hessian of ``phi``."""
    w = pen.client_alpha(topo) * pen.gamma
    H = np.diag(w)
    if w.sum() > 0:
        H -= np.outer(w, w) / w.sum()
    return H


def regularizer_matrix(topo: NetworkTopology, pen: PenaltyConfig) -> np.ndarray:
    """n x n factor ``R`` with ``Hess(sum_j (1-alpha_j) psi_j + phi) = R (x) I_d``."""
    R = global_hessian_factor(topo, pen)
    for j, m in enumerate(topo.members):
        idx = np.array(m)
        R[np.ix_(idx, idx)] += (1.0 - pen.alpha[j]) * cluster_hessian_factor(topo, pen, j)
    return R


def smoothness_profile(topo: NetworkTopology, pen: PenaltyConfig, losses) -> SmoothnessProfile:
    losses = as_batch(losses)
    a = pen.client_alpha(topo)
    return SmoothnessProfile(
        C1=float(np.max(a * pen.gamma)),
        C2=float(np.max((1.0 - a) * pen.gamma)),
        L_f=float(np.max(losses.smoothness())),
        mu=float(np.min(losses.strong_convexity())),
        L_tilde=float(np.max(losses.component_smoothness())),
        gamma_max=float(np.max(pen.gamma)),
    )


# --------------------------------------------------------------------------
# reference minimizer


def _quadratic_minimizer(topo, pen, losses: LossBatch) -> np.ndarray:
    n, d = losses.n, losses.d
    H = scipy.linalg.block_diag(*losses.A) + np.kron(regularizer_matrix(topo, pen), np.eye(d))
    rhs = losses.b.reshape(-1)
    try:
        cho = scipy.linalg.cho_factor(H, lower=True)
        sol = scipy.linalg.cho_solve(cho, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolverError("objective Hessian is singular; the minimizer is not unique") from exc
    return sol.reshape(n, d)


def reference_minimizer(topo: NetworkTopology, pen: PenaltyConfig, losses, tol: float = 1e-10,
                        max_iter: int = 200_000) -> np.ndarray:
    """Deterministic minimizer of ``F`` with certificate ``||grad F|| <= tol``.

    All-quadratic networks are solved exactly through the block normal
    equations. Otherwise runs Nesterov-accelerated gradient descent with
    step ``1 / (L_f + max gamma)`` and gradient-based restarts.
    """
    losses = as_batch(losses)
    pen.validate_for(topo)
    if losses.n != topo.n:
        raise ConfigError("one loss per client is required")
    if losses.quadratic:
        theta = _quadratic_minimizer(topo, pen, losses)
        gnorm = float(np.linalg.norm(grad_objective(theta, topo, pen, losses)))
        if gnorm <= tol:
            return theta
        # polish round-off on badly scaled systems
        for _ in range(3):
            g = grad_objective(theta, topo, pen, losses)
            theta = theta - _quadratic_minimizer(topo, pen, _residual_batch(losses, g))
            gnorm = float(np.linalg.norm(grad_objective(theta, topo, pen, losses)))
            if gnorm <= tol:
                return theta
        raise ConvergenceError("exact solve did not reach the tolerance", gnorm)

    step = 1.0 / (float(np.max(losses.smoothness())) + float(np.max(pen.gamma)))
    x = np.zeros((topo.n, losses.d))
    y = x.copy()
    t = 1.0
    for _ in range(max_iter):
        g = grad_objective(y, topo, pen, losses)
        if np.linalg.norm(g) <= tol:
            return y
        x_new = y - step * g
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        if np.sum(g * (x_new - x)) > 0:  # restart momentum
            t_new = 1.0
            y = x_new
        else:
            y = x_new + ((t - 1) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if not np.all(np.isfinite(x)):
            raise ConvergenceError("reference solver diverged", float("inf"))
    gnorm = float(np.linalg.norm(grad_objective(x, topo, pen, losses)))
    if gnorm <= tol:
        return x
    raise ConvergenceError("reference solver hit the iteration cap", gnorm)


class _residual_batch(LossBatch):
    """Quadratic batch with the network's curvature and a given linear term."""

    def __init__(self, base: LossBatch, rhs: np.ndarray):
        self.__dict__.update(base.__dict__)
        self.b = np.asarray(rhs, dtype=float)
