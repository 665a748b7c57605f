"""Clients, clusters, penalties and per-client losses.

A parameter stack is a plain ``(n, d)`` float array whose row ``i`` is the
parameter of client ``i``. Indices are 0-based everywhere in code; reports
add one.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, TopologyError, UndefinedAverageError


@dataclass(frozen=True)
class NetworkTopology:
    """Partition of ``n`` clients into ``k`` known clusters.

    ``members[j]`` lists the clients of cluster ``j`` in ascending order.
    """

    members: tuple[tuple[int, ...], ...]
    n: int = field(init=False)
    k: int = field(init=False)
    cluster_of: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        members = tuple(tuple(int(i) for i in m) for m in self.members)
        if not members:
            raise TopologyError("a topology needs at least one cluster")
        seen: list[int] = []
        for j, m in enumerate(members):
            if not m:
                raise TopologyError(f"cluster {j + 1} is empty")
            if list(m) != sorted(m) or len(set(m)) != len(m):
                raise TopologyError(f"cluster {j + 1} must list distinct clients in ascending order")
            seen.extend(m)
        n = len(seen)
        if sorted(seen) != list(range(n)):
            raise TopologyError("clusters must partition the clients 0..n-1")
        cluster_of = np.empty(n, dtype=np.intp)
        for j, m in enumerate(members):
            cluster_of[list(m)] = j
        cluster_of.setflags(write=False)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "k", len(members))
        object.__setattr__(self, "cluster_of", cluster_of)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "NetworkTopology":
        """Contiguous clusters: the first ``sizes[0]`` clients form cluster 0, etc."""
        members, start = [], 0
        for s in sizes:
            if s < 1:
                raise TopologyError("cluster sizes must be positive")
            members.append(tuple(range(start, start + s)))
            start += s
        return cls(tuple(members))

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "NetworkTopology":
        labels = np.asarray(labels, dtype=int)
        ks = np.unique(labels)
        return cls(tuple(tuple(np.flatnonzero(labels == j).tolist()) for j in ks))

    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members])

    def check_cluster(self, j: int) -> None:
        if not 0 <= j < self.k:
            raise TopologyError(f"cluster index {j} out of range for k={self.k}")


@dataclass(frozen=True)
class PenaltyConfig:
    """Per-client weights ``gamma`` and per-cluster mixing ``alpha``.

    When ``lam`` (the multi-task form) is given, ``alpha`` must be the one
    implied by :func:`alpha_from_lambda`; use :meth:`from_lambda` to build it.
    """

    gamma: np.ndarray
    alpha: np.ndarray
    lam: np.ndarray | None = None

    def __post_init__(self):
        gamma = np.array(self.gamma, dtype=float).ravel()
        alpha = np.array(self.alpha, dtype=float).ravel()
        if np.any(~np.isfinite(gamma)) or np.any(gamma < 0):
            raise ConfigError("gamma must be finite and non-negative")
        if np.any(~np.isfinite(alpha)) or np.any(alpha < 0) or np.any(alpha > 1):
            raise ConfigError("alpha must lie in [0, 1]")
        lam = None
        if self.lam is not None:
            lam = np.array(self.lam, dtype=float).ravel()
            if lam.shape != alpha.shape or np.any(lam < 0):
                raise ConfigError("lambda must be non-negative, one entry per cluster")
            lam.setflags(write=False)
        gamma.setflags(write=False)
        alpha.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def from_lambda(cls, topo: NetworkTopology, lam, gamma) -> "PenaltyConfig":
        lam = np.broadcast_to(np.asarray(lam, dtype=float), (topo.k,)).copy()
        gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (topo.n,)).copy()
        alpha = np.array([alpha_from_lambda(lam[j], gamma[list(m)]) for j, m in enumerate(topo.members)])
        return cls(gamma=gamma, alpha=alpha, lam=lam)

    @classmethod
    def uniform(cls, topo: NetworkTopology, gamma: float, alpha: float) -> "PenaltyConfig":
        return cls(gamma=np.full(topo.n, float(gamma)), alpha=np.full(topo.k, float(alpha)))

    def validate_for(self, topo: NetworkTopology) -> None:
        if self.gamma.shape != (topo.n,):
            raise ConfigError(f"gamma has {self.gamma.size} entries, topology has {topo.n} clients")
        if self.alpha.shape != (topo.k,):
            raise ConfigError(f"alpha has {self.alpha.size} entries, topology has {topo.k} clusters")
        if self.lam is not None:
            implied = [alpha_from_lambda(self.lam[j], self.gamma[list(m)]) for j, m in enumerate(topo.members)]
            if not np.allclose(implied, self.alpha, rtol=1e-12, atol=1e-15):
                raise ConfigError("alpha does not match lambda/(lambda + sum gamma)")

    def client_alpha(self, topo: NetworkTopology) -> np.ndarray:
        """``alpha`` of each client's cluster, shape ``(n,)``."""
        return self.alpha[topo.cluster_of]


def alpha_from_lambda(lam: float, gammas) -> float:
    """Mixing weight that makes the multi-task and averaged objectives agree."""
    gammas = np.asarray(gammas, dtype=float).ravel()
    if gammas.size == 0:
        raise TopologyError("cannot convert lambda for an empty cluster")
    if lam < 0 or np.any(gammas < 0):
        raise ConfigError("lambda and gamma must be non-negative")
    total = float(gammas.sum())
    if lam == 0:
        return 0.0
    return float(lam / (lam + total))


def lambda_from_alpha(alpha: float, gammas) -> float:
    """Inverse of :func:`alpha_from_lambda` on ``alpha < 1``."""
    if not 0 <= alpha < 1:
        raise ConfigError("alpha must lie in [0, 1) to be inverted")
    return float(alpha * np.sum(gammas) / (1.0 - alpha))


def cluster_average(stack: np.ndarray, topo: NetworkTopology, pen: PenaltyConfig, j: int) -> np.ndarray:
    topo.check_cluster(j)
    idx = list(topo.members[j])
    g = pen.gamma[idx]
    total = g.sum()
    if total <= 0:
        raise UndefinedAverageError(f"cluster {j + 1} has zero total gamma")
    return g @ stack[idx] / total


def cluster_averages(stack: np.ndarray, topo: NetworkTopology, pen: PenaltyConfig) -> np.ndarray:
    """All cluster averages at once, shape ``(k, d)``."""
    g = pen.gamma
    totals = np.bincount(topo.cluster_of, weights=g, minlength=topo.k)
    if np.any(totals <= 0):
        raise UndefinedAverageError("a cluster has zero total gamma")
    sums = np.zeros((topo.k, stack.shape[1]))
    np.add.at(sums, topo.cluster_of, g[:, None] * stack)
    return sums / totals[:, None]


def global_average(stack: np.ndarray, topo: NetworkTopology, pen: PenaltyConfig) -> np.ndarray:
    w = pen.client_alpha(topo) * pen.gamma
    total = w.sum()
    if total <= 0:
        raise UndefinedAverageError("sum of alpha_j * gamma_i is zero; the global average is undefined")
    return w @ stack / total


# --------------------------------------------------------------------------
# client data and losses


@dataclass(frozen=True)
class ClientDataset:
    X: np.ndarray
    y: np.ndarray
    noise_var: float | None = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ConfigError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if X.shape[0] < 1:
            raise ConfigError("a client needs at least one observation")
        if self.noise_var is not None and not self.noise_var > 0:
            raise ConfigError("noise variance must be positive")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


class LossOracle(ABC):
    """Finite-sum client loss ``f(theta) = mean_l f_l(theta)``."""

    @abstractmethod
    def value(self, theta: np.ndarray) -> float: ...

    @abstractmethod
    def grad(self, theta: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def component_grad(self, theta: np.ndarray, l: int) -> np.ndarray: ...

    @abstractmethod
    def n_components(self) -> int: ...

    @abstractmethod
    def smoothness(self) -> float:
        """Smoothness constant of the whole loss."""

    @abstractmethod
    def component_smoothness(self) -> float:
        """Largest smoothness constant over the components."""

    @abstractmethod
    def strong_convexity(self) -> float: ...

    @property
    @abstractmethod
    def dim(self) -> int: ...


class QuadraticLoss(LossOracle):
    """``||y - X theta||^2 / (2 sigma^2)``, split row-wise into components.

    Component ``l`` is ``n/(2 sigma^2) (x_l^T theta - y_l)^2`` so that the
    uniform mean of components is the loss itself.
    """

    def __init__(self, data: ClientDataset):
        if data.noise_var is None:
            raise ConfigError("quadratic loss needs the noise variance")
        self.data = data
        self.X = data.X
        self.y = data.y
        self.s2 = float(data.noise_var)
        self.A = self.X.T @ self.X / self.s2
        self.b = self.X.T @ self.y / self.s2
        self.c = float(self.y @ self.y) / (2 * self.s2)
        eig = np.linalg.eigvalsh(self.A)
        self._L = float(max(eig[-1], 0.0))
        # rank-deficient designs report mu = 0 rather than round-off noise
        self._mu = float(eig[0]) if eig[0] > 1e-12 * max(eig[-1], 1.0) else 0.0
        n = self.X.shape[0]
        self._Lc = float(n * np.max(np.einsum("ij,ij->i", self.X, self.X)) / self.s2)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def value(self, theta):
        r = self.X @ theta - self.y
        return float(r @ r) / (2 * self.s2)

    def grad(self, theta):
        return self.A @ theta - self.b

    def component_grad(self, theta, l):
        x = self.X[l]
        n = self.X.shape[0]
        return (n / self.s2) * (x @ theta - self.y[l]) * x

    def n_components(self):
        return self.X.shape[0]

    def smoothness(self):
        return self._L

    def component_smoothness(self):
        return self._Lc

    def strong_convexity(self):
        return self._mu

    def hessian(self) -> np.ndarray:
        return self.A

    def minimizer(self) -> np.ndarray:
        return np.linalg.pinv(self.A) @ self.b


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LogisticLoss(LossOracle):
    """Mean logistic negative log-likelihood plus ``ridge/2 ||theta||^2``.

    ``ridge = 0`` gives the plain likelihood, which is not strongly convex;
    the optimizers' guarantees then no longer apply.
    """

    def __init__(self, data: ClientDataset, ridge: float = 1e-4):
        y = data.y
        if not np.all((y == 0) | (y == 1)):
            raise ConfigError("logistic labels must be 0 or 1")
        if ridge < 0:
            raise ConfigError("ridge must be non-negative")
        self.data = data
        self.X = data.X
        self.y = y
        self.ridge = float(ridge)
        n = self.X.shape[0]
        top = np.linalg.eigvalsh(self.X.T @ self.X)[-1]
        self._L = float(top) / (4 * n) + self.ridge
        self._Lc = float(np.max(np.einsum("ij,ij->i", self.X, self.X))) / 4 + self.ridge

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def value(self, theta):
        z = self.X @ theta
        return float(np.mean(_log1pexp(z) - self.y * z)) + 0.5 * self.ridge * float(theta @ theta)

    def grad(self, theta):
        z = self.X @ theta
        return self.X.T @ (_sigmoid(z) - self.y) / self.X.shape[0] + self.ridge * theta

    def component_grad(self, theta, l):
        x = self.X[l]
        z = np.array([x @ theta])
        return (_sigmoid(z)[0] - self.y[l]) * x + self.ridge * theta

    def n_components(self):
        return self.X.shape[0]

    def smoothness(self):
        return self._L

    def component_smoothness(self):
        return self._Lc

    def strong_convexity(self):
        return self.ridge


def quadratic_loss_oracle(data: ClientDataset) -> QuadraticLoss:
    return QuadraticLoss(data)


def logistic_loss_oracle(data: ClientDataset, ridge: float = 1e-4) -> LogisticLoss:
    return LogisticLoss(data, ridge=ridge)


class LossBatch:
    """All client losses of a network, evaluated on a whole parameter stack.

    All-quadratic networks take a batched fast path through the stacked
    Gram matrices; anything else loops over clients.
    """

    def __init__(self, losses: Sequence[LossOracle]):
        self.losses = list(losses)
        if not self.losses:
            raise TopologyError("no client losses given")
        dims = {f.dim for f in self.losses}
        if len(dims) != 1:
            raise ConfigError(f"client losses disagree on the dimension: {sorted(dims)}")
        self.n = len(self.losses)
        self.d = dims.pop()
        self.sizes = np.array([f.n_components() for f in self.losses])
        self.quadratic = all(isinstance(f, QuadraticLoss) for f in self.losses)
        if self.quadratic:
            self.A = np.stack([f.A for f in self.losses])
            self.b = np.stack([f.b for f in self.losses])
            self.c = np.array([f.c for f in self.losses])
            m = int(self.sizes.max())
            self._Xp = np.zeros((self.n, m, self.d))
            self._yp = np.zeros((self.n, m))
            for i, f in enumerate(self.losses):
                self._Xp[i, : f.X.shape[0]] = f.X
                self._yp[i, : f.X.shape[0]] = f.y
            self._cscale = np.array([f.X.shape[0] / f.s2 for f in self.losses])
        self.logistic = all(isinstance(f, LogisticLoss) for f in self.losses)
        if self.logistic:
            m = int(self.sizes.max())
            self._Xp = np.zeros((self.n, m, self.d))
            self._yp = np.zeros((self.n, m))
            self._mask = np.zeros((self.n, m))
            for i, f in enumerate(self.losses):
                self._Xp[i, : f.X.shape[0]] = f.X
                self._yp[i, : f.X.shape[0]] = f.y
                self._mask[i, : f.X.shape[0]] = 1.0
            self._ridge = np.array([f.ridge for f in self.losses])

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        return self.losses[i]

    def values(self, stack: np.ndarray) -> np.ndarray:
        if self.quadratic:
            quad = 0.5 * np.einsum("ij,ijk,ik->i", stack, self.A, stack)
            return quad - np.einsum("ij,ij->i", self.b, stack) + self.c
        if self.logistic:
            z = np.einsum("imk,ik->im", self._Xp, stack)
            nll = np.sum(self._mask * (_log1pexp(z) - self._yp * z), axis=1) / self.sizes
            return nll + 0.5 * self._ridge * np.einsum("ij,ij->i", stack, stack)
        return np.array([f.value(t) for f, t in zip(self.losses, stack)])

    def value(self, stack: np.ndarray) -> float:
        return float(self.values(stack).sum())

    def grad(self, stack: np.ndarray) -> np.ndarray:
        if self.quadratic:
            return np.einsum("ijk,ik->ij", self.A, stack) - self.b
        if self.logistic:
            z = np.einsum("imk,ik->im", self._Xp, stack)
            r = self._mask * (_sigmoid(z) - self._yp)
            return np.einsum("imk,im->ik", self._Xp, r) / self.sizes[:, None] + self._ridge[:, None] * stack
        return np.stack([f.grad(t) for f, t in zip(self.losses, stack)])

    def component_grad(self, stack: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Row ``i`` is the gradient of component ``idx[i]`` of client ``i``."""
        idx = np.asarray(idx, dtype=np.intp)
        if np.any(idx < 0) or np.any(idx >= self.sizes):
            raise IndexError("component index out of range")
        if self.quadratic:
            rows = np.arange(self.n)
            x = self._Xp[rows, idx]
            r = np.einsum("ij,ij->i", x, stack) - self._yp[rows, idx]
            return (self._cscale * r)[:, None] * x
        return np.stack([f.component_grad(t, l) for f, t, l in zip(self.losses, stack, idx)])

    def sample_components(self, rng: np.random.Generator) -> np.ndarray:
        return np.floor(rng.random(self.n) * self.sizes).astype(np.intp)

    def smoothness(self) -> np.ndarray:
        return np.array([f.smoothness() for f in self.losses])

    def component_smoothness(self) -> np.ndarray:
        return np.array([f.component_smoothness() for f in self.losses])

    def strong_convexity(self) -> np.ndarray:
        return np.array([f.strong_convexity() for f in self.losses])


def as_batch(losses) -> LossBatch:
    return losses if isinstance(losses, LossBatch) else LossBatch(losses)
