"""Small random problem instances shared by tests, experiments and scripts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .network import ClientDataset, LossBatch, NetworkTopology, PenaltyConfig, QuadraticLoss


@dataclass
class QuadraticInstance:
    topo: NetworkTopology
    pen: PenaltyConfig
    losses: LossBatch


def random_quadratic_instance(sizes=(4, 4, 4), d: int = 4, n_obs: int = 8, seed: int = 0,
                              gamma=(0.5, 2.0), alpha=(0.1, 0.9), noise_var: float = 1.0,
                              condition: float | None = None) -> QuadraticInstance:
    """Clustered least-squares instance with random penalties.

    ``condition`` fixes every client's design to singular values spread
    geometrically over ``[1/sqrt(condition), 1]`` (times ``sqrt(n_obs)``), which makes
    ``mu / L = 1 / condition`` for each client loss.
    """
    topo = NetworkTopology.from_sizes(sizes)
    g = _rng.stream(seed, "instance")
    gam = g.uniform(*gamma, size=topo.n) if np.ndim(gamma) else np.full(topo.n, float(gamma))
    alp = g.uniform(*alpha, size=topo.k) if np.ndim(alpha) else np.full(topo.k, float(alpha))
    pen = PenaltyConfig(gamma=gam, alpha=alp)
    centers = g.normal(size=(topo.k, d)) * 2.0
    losses = []
    for i in range(topo.n):
        X = g.normal(size=(n_obs, d))
        if condition is not None:
            U, _, Vt = np.linalg.svd(X, full_matrices=False)
            s = np.sqrt(n_obs) * np.geomspace(1.0, 1.0 / np.sqrt(condition), d)
            X = (U * s) @ Vt
        theta = centers[topo.cluster_of[i]] + g.normal(size=d)
        y = X @ theta + g.normal(size=n_obs) * np.sqrt(noise_var)
        losses.append(QuadraticLoss(ClientDataset(X, y, noise_var)))
    return QuadraticInstance(topo, pen, LossBatch(losses))
