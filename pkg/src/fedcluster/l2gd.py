"""Asynchronous loopless local gradient descent.

Each iteration flips a network coin ``xi0 ~ Bernoulli(p0)``. Heads: every
cluster averages and the clusters exchange averages (a step on both
regularizers). Tails: every cluster ``j`` flips its own coin
``xi_j ~ Bernoulli(p_j)`` and either averages internally or lets its
clients take a local gradient step. The update is SGD on ``F`` with the
unbiased oracle :func:`gradient_oracle`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as _rng
from .errors import ConfigError, DivergenceError, ScheduleError
from .network import LossBatch, NetworkTopology, PenaltyConfig, as_batch
from .objective import SmoothnessProfile, objective_value, regularizer_grads

MODES = ("async", "simple")


@dataclass(frozen=True)
class SchedulerConfig:
    """Communication schedule and step size.

    In ``simple`` mode a single coin with probability ``p0`` decides between
    a combined cluster-and-network averaging step and a local step; ``p``
    and ``tau`` are ignored.
    """

    p0: float
    p: np.ndarray
    tau: np.ndarray
    eta: float
    T: int = 1000
    seed: int = 0
    mode: str = "async"
    safe_step: bool = False  # enforce eta <= 1 / (2 * expected smoothness) before running

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.p, dtype=float)).copy()
        tau = np.atleast_1d(np.asarray(self.tau, dtype=float)).copy()
        if self.mode not in MODES:
            raise ConfigError(f"unknown schedule mode {self.mode!r}; expected one of {MODES}")
        if not 0 <= self.p0 <= 1:
            raise ConfigError("p0 must lie in [0, 1]")
        if np.any(p < 0) or np.any(p > 1) or np.any(tau < 0) or np.any(tau > 1):
            raise ConfigError("p_j and tau_j must lie in [0, 1]")
        if p.shape != tau.shape:
            raise ConfigError("p and tau need one entry per cluster")
        if not self.eta > 0:
            raise ConfigError("step size must be positive")
        if self.T < 0:
            raise ConfigError("iteration budget must be non-negative")
        p.setflags(write=False)
        tau.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "tau", tau)

    @classmethod
    def simple(cls, p: float, eta: float, T: int = 1000, seed: int = 0, k: int = 1) -> "SchedulerConfig":
        return cls(p0=p, p=np.zeros(k), tau=np.zeros(k), eta=eta, T=T, seed=seed, mode="simple")

    def for_topology(self, topo: NetworkTopology) -> "SchedulerConfig":
        """Broadcast scalar ``p``/``tau`` to one entry per cluster."""
        if self.p.size == topo.k:
            return self
        if self.p.size != 1:
            raise ConfigError(f"schedule has {self.p.size} cluster probabilities, topology has {topo.k}")
        return replace(self, p=np.full(topo.k, self.p[0]), tau=np.full(topo.k, self.tau[0]))


@dataclass
class CommLog:
    """Branch counts and communication-round counts of one run.

    ``global_steps + cluster_steps[j] + local_steps[j] == T`` for every
    cluster. A communication round is counted when a coin switches into its
    communicate branch (network coin for ``between_cluster_rounds``, the
    cluster's coin on a tails round for ``within_cluster_rounds``).
    """

    k: int
    T: int = 0
    global_steps: int = 0
    cluster_steps: np.ndarray = None
    local_steps: np.ndarray = None
    between_cluster_rounds: int = 0
    within_cluster_rounds: np.ndarray = None
    anchor_refreshes: int = 0

    def __post_init__(self):
        for name in ("cluster_steps", "local_steps", "within_cluster_rounds"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.k, dtype=np.int64))

    def check(self) -> None:
        total = self.global_steps + self.cluster_steps + self.local_steps
        if np.any(total != self.T):
            raise AssertionError(f"branch counts {total} do not add up to T={self.T}")

    def as_dict(self) -> dict:
        return {
            "T": self.T,
            "global_steps": self.global_steps,
            "cluster_steps": self.cluster_steps.tolist(),
            "local_steps": self.local_steps.tolist(),
            "between_cluster_rounds": self.between_cluster_rounds,
            "within_cluster_rounds": self.within_cluster_rounds.tolist(),
            "anchor_refreshes": self.anchor_refreshes,
        }


@dataclass
class TrajectoryRecord:
    iters: list = field(default_factory=list)
    dist_sq: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    between_rounds: list = field(default_factory=list)
    within_rounds: list = field(default_factory=list)

    def record(self, t, dist_sq, objective, comm: CommLog):
        self.iters.append(int(t))
        self.dist_sq.append(dist_sq)
        self.objective.append(objective)
        self.between_rounds.append(int(comm.between_cluster_rounds))
        self.within_rounds.append(comm.within_cluster_rounds.tolist())


@dataclass
class RunResult:
    theta: np.ndarray
    comm: CommLog
    trajectory: TrajectoryRecord


# --------------------------------------------------------------------------
# tuning rules


def optimal_tau(p0: float, pj: float) -> float:
    """Fraction of the cluster regularizer handled on network rounds."""
    den = p0 + 2.0 * (1.0 - p0) * pj
    if den <= 0:
        raise ScheduleError("p0 = p_j = 0 leaves no averaging rounds at all")
    return p0 / den


def optimal_taus(p0: float, p) -> np.ndarray:
    return np.array([optimal_tau(p0, float(pj)) for pj in np.atleast_1d(p)])


@dataclass(frozen=True)
class TunedSchedule:
    p0: float
    p: float
    tau: float
    eta: float
    L_tilde: float  # tuned upper bound on the expected smoothness

    def to_config(self, k: int, T: int = 1000, seed: int = 0) -> SchedulerConfig:
        return SchedulerConfig(p0=self.p0, p=np.full(k, self.p), tau=np.full(k, self.tau),
                               eta=self.eta, T=T, seed=seed)


def _tune(C1: float, C2: float, L: float) -> tuple[float, float, float, float]:
    if C1 == 0 and C2 == 0:
        warnings.warn("no regularization: the schedule reduces to pure local training", stacklevel=3)
        return 0.0, 0.0, 0.0, L
    if C2 > C1:
        p0 = 2 * C1 / (C1 + C2 + L)
        pj = (C2 - C1) / (C2 - C1 + L)
        bound = C1 + C2 + L
    else:
        p0 = 2 * C1 / (2 * C1 + L)
        pj = 0.0
        bound = 2 * C1 + L
    return p0, pj, optimal_tau(p0, pj), bound


def tune_schedule(profile: SmoothnessProfile) -> TunedSchedule:
    """Probabilities, ``tau`` and step minimizing the smoothness upper bound."""
    if not profile.mu > 0:
        raise ConfigError("tuning needs a strongly convex objective (mu > 0)")
    p0, pj, tau, bound = _tune(profile.C1, profile.C2, profile.L_f)
    return TunedSchedule(p0=p0, p=pj, tau=tau, eta=1.0 / (2.0 * bound), L_tilde=bound)


# --------------------------------------------------------------------------
# the oracle


def _ratio(num, den):
    """``num / den``, with 0/0 = 0 for terms whose weight is identically zero."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    bad = (den == 0) & (num != 0)
    if np.any(bad):
        raise ScheduleError("a term with non-zero weight has zero probability mass")
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den != 0)


class _Averager:
    """Precomputed averaging weights: ``cbar = Wc @ stack``, ``gbar = wg @ stack``."""

    def __init__(self, topo: NetworkTopology, pen: PenaltyConfig):
        g = pen.gamma
        self.Wc = np.zeros((topo.k, topo.n))
        for j, m in enumerate(topo.members):
            idx = list(m)
            tot = g[idx].sum()
            if tot > 0:
                self.Wc[j, idx] = g[idx] / tot
        w = pen.client_alpha(topo) * g
        self.wg = w / w.sum() if w.sum() > 0 else np.zeros(topo.n)
        self.cluster_of = topo.cluster_of

    def cluster(self, stack):
        return (self.Wc @ stack)[self.cluster_of]

    def network(self, stack):
        return self.wg @ stack


def _safe_div(num, den):
    """``num / den`` with 0 where ``den == 0``; the branch guard keeps those entries unused."""
    num = np.asarray(num, dtype=float)
    den = np.broadcast_to(np.asarray(den, dtype=float), num.shape)
    return np.divide(num, den, out=np.zeros(num.shape), where=den != 0)


class _Coefficients:
    """Per-client branch scalings of the oracle.

    Scalings of a branch with zero probability are stored as 0 and never
    used: the coins cannot select that branch and :func:`gradient_oracle`
    rejects it explicitly.
    """

    def __init__(self, topo, pen, sched: SchedulerConfig):
        g = pen.gamma
        a = pen.client_alpha(topo)
        p0 = sched.p0
        if sched.mode == "simple":
            self.g_net = _safe_div(g * a, p0)
            self.g_clu_on_net = _safe_div(g * (1 - a), p0)
            self.g_clu = np.zeros_like(g)
            self.local = _safe_div(np.ones_like(g), 1 - p0)
        else:
            p = sched.p[topo.cluster_of]
            tau = sched.tau[topo.cluster_of]
            self.g_net = _safe_div(g * a, p0)
            self.g_clu_on_net = _safe_div(g * tau * (1 - a), p0)
            self.g_clu = _safe_div(g * (1 - tau) * (1 - a), (1 - p0) * p)
            self.local = _safe_div(np.ones_like(g), (1 - p0) * (1 - p))


def _branch_guard(sched: SchedulerConfig, xi0: int, xi):
    if xi0 and sched.p0 == 0:
        raise ScheduleError("network branch drawn but p0 = 0")
    if not xi0:
        if sched.p0 == 1:
            raise ScheduleError("tails branch drawn but p0 = 1")
        if sched.mode == "async":
            xi = np.asarray(xi, dtype=bool)
            if np.any(xi & (sched.p == 0)):
                raise ScheduleError("cluster-averaging branch drawn for a cluster with p_j = 0")
            if np.any(~xi & (sched.p == 1)):
                raise ScheduleError("local branch drawn for a cluster with p_j = 1")


def gradient_oracle(stack, topo: NetworkTopology, pen: PenaltyConfig, losses, sched: SchedulerConfig,
                    xi0: int, xi=None) -> np.ndarray:
    """One draw of the stochastic gradient for the coin outcomes ``(xi0, xi)``.

    In ``simple`` mode ``xi`` is ignored.
    """
    losses = as_batch(losses)
    sched = sched.for_topology(topo)
    stack = np.asarray(stack, dtype=float)
    if xi is None:
        xi = np.zeros(topo.k, dtype=bool)
    xi = np.asarray(xi, dtype=bool).ravel()
    if xi.size != topo.k:
        raise ConfigError("need one cluster coin per cluster")
    _branch_guard(sched, xi0, xi)
    return _oracle(stack, topo, losses, sched, _Averager(topo, pen), _Coefficients(topo, pen, sched), xi0, xi)


def _oracle(stack, topo, losses, sched, avg: _Averager, co: _Coefficients, xi0, xi):
    if xi0:
        dc = stack - avg.cluster(stack)
        dg = stack - avg.network(stack)
        return co.g_net[:, None] * dg + co.g_clu_on_net[:, None] * dc
    if sched.mode == "simple":
        return co.local[:, None] * losses.grad(stack)
    on = xi[topo.cluster_of]
    out = np.empty_like(stack)
    if np.any(on):
        dc = stack - avg.cluster(stack)
        out[on] = co.g_clu[on, None] * dc[on]
    if not np.all(on):
        grads = losses.grad(stack)
        out[~on] = co.local[~on, None] * grads[~on]
    return out


def branch_values(stack, topo, pen, losses, sched: SchedulerConfig):
    """The oracle's value on each branch, per client.

    Returns ``(net, clu, loc)`` arrays of shape ``(n, d)``; ``clu`` and
    ``loc`` are the tails-round values. Branches with zero probability
    hold zeros.
    """
    losses = as_batch(losses)
    sched = sched.for_topology(topo)
    stack = np.asarray(stack, dtype=float)
    avg, co = _Averager(topo, pen), _Coefficients(topo, pen, sched)
    dc = stack - avg.cluster(stack)
    dg = stack - avg.network(stack)
    net = co.g_net[:, None] * dg + co.g_clu_on_net[:, None] * dc
    clu = co.g_clu[:, None] * dc
    loc = co.local[:, None] * losses.grad(stack)
    return net, clu, loc


def branch_probabilities(topo, sched: SchedulerConfig):
    """Per-client probabilities of the network, cluster and local branches."""
    sched = sched.for_topology(topo)
    p = sched.p[topo.cluster_of] if sched.mode == "async" else np.zeros(topo.n)
    p0 = sched.p0
    return np.full(topo.n, p0), (1 - p0) * p, (1 - p0) * (1 - p)


def oracle_mean(stack, topo, pen, losses, sched) -> np.ndarray:
    """Exact expectation of the oracle over the coins."""
    net, clu, loc = branch_values(stack, topo, pen, losses, sched)
    q0, q1, q2 = branch_probabilities(topo, sched)
    return q0[:, None] * net + q1[:, None] * clu + q2[:, None] * loc


def oracle_difference_moment(stack, stack_ref, topo, pen, losses, sched) -> float:
    """Exact ``E ||G(stack) - G(stack_ref)||^2`` over the coins.

    On a heads round every client is on the network branch; on tails each
    cluster's clients share their cluster's branch, and clusters are
    independent, so the expectation splits into per-client sums.
    """
    a = branch_values(stack, topo, pen, losses, sched)
    b = branch_values(stack_ref, topo, pen, losses, sched)
    q0, q1, q2 = branch_probabilities(topo, sched)
    sq = [np.sum((x - y) ** 2, axis=1) for x, y in zip(a, b)]
    return float(np.sum(q0 * sq[0] + q1 * sq[1] + q2 * sq[2]))


def variance_bound(stack, stack_ref, topo, pen, losses, sched: SchedulerConfig) -> float:
    """Right-hand side of the oracle-variance bound that fixes the optimal ``tau``."""
    losses = as_batch(losses)
    sched = sched.for_topology(topo)
    gpsi, gphi = regularizer_grads(stack, topo, pen)
    rpsi, rphi = regularizer_grads(stack_ref, topo, pen)
    dF = losses.grad(np.asarray(stack, float)) - losses.grad(np.asarray(stack_ref, float))
    dpsi = np.bincount(topo.cluster_of, weights=np.sum((gpsi - rpsi) ** 2, axis=1), minlength=topo.k)
    dFj = np.bincount(topo.cluster_of, weights=np.sum(dF ** 2, axis=1), minlength=topo.k)
    p0, p, a = sched.p0, sched.p, pen.alpha
    out = float(_ratio(2.0 * np.sum((gphi - rphi) ** 2), p0))
    out += float(np.sum(_ratio(2 * (1 - a) ** 2 * dpsi, p0 + 2 * (1 - p0) * p)))
    out += float(np.sum(_ratio(dFj, (1 - p0) * (1 - p))))
    return out


def tau_variance_coefficient(p0: float, pj: float, tau: float) -> float:
    """Coefficient of ``(1 - alpha_j)^2 ||d psi_j||^2`` in the variance bound as a function of ``tau``."""
    return float(_ratio(2 * tau ** 2, p0) + _ratio((1 - tau) ** 2, pj * (1 - p0)))


# --------------------------------------------------------------------------
# expected smoothness and residual variance


def _check_tau(topo, sched):
    want = np.array([optimal_tau(sched.p0, pj) for pj in sched.p])
    if not np.allclose(want, sched.tau, rtol=1e-10, atol=1e-12):
        raise ScheduleError("tau_j must follow the optimal rule p0 / (p0 + 2 (1 - p0) p_j)")


def expected_smoothness(topo: NetworkTopology, pen: PenaltyConfig, losses, sched: SchedulerConfig,
                        component: bool = False) -> float:
    """Expected-smoothness constant of the oracle.

    ``component=True`` uses the component smoothness in the loss term, as
    the variance-reduced oracle requires.
    """
    losses = as_batch(losses)
    sched = sched.for_topology(topo)
    _check_tau(topo, sched)
    p0, p = sched.p0, sched.p
    a = pen.client_alpha(topo)
    g = pen.gamma
    L = float(np.max(losses.component_smoothness() if component else losses.smoothness()))
    t1 = float(_ratio(2.0 * np.max(a * g), p0))
    gmax = np.array([np.max(g[list(m)]) for m in topo.members])
    t2 = float(np.max(_ratio(2 * (1 - pen.alpha) * gmax, p0 + 2 * (1 - p0) * p)))
    if p0 == 1 or np.any(p == 1):
        raise ScheduleError("a schedule without local steps has unbounded expected smoothness")
    t3 = L / (1 - p0) * float(np.max(1.0 / (1.0 - p)))
    return max(t1, t2, t3)


def residual_variance(theta_hat, topo: NetworkTopology, pen: PenaltyConfig, losses,
                      sched: SchedulerConfig) -> float:
    """Oracle variance bound at the minimizer (the ``sigma^2`` of the rate)."""
    losses = as_batch(losses)
    sched = sched.for_topology(topo)
    _check_tau(topo, sched)
    if sched.p0 == 1 or np.any(sched.p == 1):
        raise ScheduleError("a schedule without local steps has unbounded residual variance")
    gpsi, gphi = regularizer_grads(theta_hat, topo, pen)
    grads = losses.grad(np.asarray(theta_hat, float))
    p0, p, a = sched.p0, sched.p, pen.alpha
    npsi = np.bincount(topo.cluster_of, weights=np.sum(gpsi ** 2, axis=1), minlength=topo.k)
    nF = np.bincount(topo.cluster_of, weights=np.sum(grads ** 2, axis=1), minlength=topo.k)
    out = float(_ratio(2.0 * np.sum(gphi ** 2), p0))
    out += float(np.sum(_ratio(2 * (1 - a) ** 2 * npsi, p0 + 2 * (1 - p0) * p)))
    out += float(np.sum(nF / ((1 - p0) * (1 - p))))
    return out


def expected_comm_rounds(sched: SchedulerConfig, T: int | None = None):
    """Expected between- and within-cluster communication rounds in ``T`` iterations."""
    T = sched.T if T is None else T
    p0, p = sched.p0, sched.p
    return p0 * (1 - p0) * T, (1 - p0) * p * (1 - p) * T


# --------------------------------------------------------------------------
# the run


def _make_record(theta_hat, record_every, objective_every):
    if record_every is None or record_every < 1:
        raise ConfigError("record_every must be a positive integer")
    return TrajectoryRecord()


def _checkpoint(traj, t, theta, theta_hat, topo, pen, losses, comm, record_every, objective_every):
    if t % record_every == 0:
        dist = float(np.sum((theta - theta_hat) ** 2)) if theta_hat is not None else float("nan")
        obj = (objective_value(theta, topo, pen, losses)
               if objective_every and t % objective_every == 0 else float("nan"))
        traj.record(t, dist, obj, comm)


def run_async_l2gd(topo: NetworkTopology, pen: PenaltyConfig, losses, sched: SchedulerConfig,
                   theta_hat: np.ndarray | None = None, record_every: int = 1,
                   objective_every: int | None = None, theta0: np.ndarray | None = None) -> RunResult:
    """Run the schedule for ``sched.T`` iterations from ``theta0`` (zeros by default)."""
    losses = as_batch(losses)
    pen.validate_for(topo)
    sched = sched.for_topology(topo)
    if losses.n != topo.n:
        raise ConfigError("one loss per client is required")
    if sched.safe_step and sched.mode == "async":
        bound = 1.0 / (2.0 * expected_smoothness(topo, pen, losses, sched))
        if sched.eta > bound * (1 + 1e-12):
            raise ScheduleError(f"step size {sched.eta:.6g} exceeds the safe bound {bound:.6g}")
    theta = np.zeros((topo.n, losses.d)) if theta0 is None else np.array(theta0, dtype=float)
    avg, co = _Averager(topo, pen), _Coefficients(topo, pen, sched)
    coin0 = _rng.stream(sched.seed, "branch")
    coinj = _rng.stream(sched.seed, "cluster")
    comm = CommLog(k=topo.k)
    traj = _make_record(theta_hat, record_every, objective_every)
    _checkpoint(traj, 0, theta, theta_hat, topo, pen, losses, comm, record_every, objective_every)

    simple = sched.mode == "simple"
    prev0 = False
    prevj = np.zeros(topo.k, dtype=bool)
    eta = sched.eta
    for t in range(1, sched.T + 1):
        xi0 = bool(coin0.random() < sched.p0)
        # cluster coins are drawn every round so streams stay aligned
        xi = coinj.random(topo.k) < sched.p
        if xi0:
            comm.global_steps += 1
            if not prev0:
                comm.between_cluster_rounds += 1
        elif simple:
            comm.local_steps += 1
        else:
            comm.cluster_steps += xi
            comm.local_steps += ~xi
            comm.within_cluster_rounds += xi & ~prevj
        prev0 = xi0
        prevj = xi
        with np.errstate(over="ignore", invalid="ignore"):  # reported as DivergenceError below
            theta = theta - eta * _oracle(theta, topo, losses, sched, avg, co, xi0, xi)
        if not np.isfinite(theta).all():
            raise DivergenceError("iterate is no longer finite", t)
        comm.T = t
        _checkpoint(traj, t, theta, theta_hat, topo, pen, losses, comm, record_every, objective_every)
    comm.check()
    return RunResult(theta=theta, comm=comm, trajectory=traj)


def iterations_to_reach(trajectory: TrajectoryRecord, threshold: float, key: str = "dist_sq") -> float:
    """First logged iteration whose ``key`` value is at or below ``threshold`` (inf if never)."""
    for t, v in zip(trajectory.iters, getattr(trajectory, key)):
        if v <= threshold:
            return t
    return math.inf


def simple_safe_step(topo: NetworkTopology, pen: PenaltyConfig, losses, p: float) -> float:
    """Half the largest step for which both single-coin updates are contractive.

    A communication step moves each client by ``eta/p`` times a regularizer
    gradient with curvature at most ``max gamma``; a local step by
    ``eta/(1-p)`` times a loss gradient with curvature at most ``L``.
    """
    losses = as_batch(losses)
    gmax = float(np.max(pen.gamma))
    L = float(np.max(losses.smoothness()))
    caps = []
    if gmax > 0:
        caps.append(p / gmax)
    if L > 0:
        caps.append((1 - p) / L)
    if not caps:
        raise ConfigError("nothing to optimize: zero curvature everywhere")
    return 0.5 * min(caps)
