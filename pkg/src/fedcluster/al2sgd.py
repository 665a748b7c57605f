"""Accelerated, variance-reduced variant of the asynchronous schedule.

Each client keeps an anchor ``x_i`` with its stored full gradient and runs
an L-Katyusha recursion on ``(y_i, z_i)``; the stochastic gradient is the
anchor gradient of ``F`` plus a branch-dependent control-variate
correction. Anchors (and their cluster and network averages) are refreshed
together with probability ``rho``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .errors import ConfigError, DivergenceError, StaleAnchorError
from .l2gd import (
    CommLog,
    RunResult,
    SchedulerConfig,
    TrajectoryRecord,
    TunedSchedule,
    _Averager,
    _branch_guard,
    _Coefficients,
    _tune,
    expected_smoothness,
)
from .network import LossBatch, NetworkTopology, PenaltyConfig, as_batch
from .objective import SmoothnessProfile, objective_value


@dataclass(frozen=True)
class KatyushaParams:
    eta: float
    a1: float
    a2: float
    b1: float
    b2: float
    rho: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError("step size must be positive")
        if not 0 < self.rho <= 1:
            raise ConfigError("anchor-refresh probability must lie in (0, 1]")
        if self.a1 < 0 or self.a2 < 0 or self.a1 + self.a2 > 1 + 1e-15:
            raise ConfigError("a1, a2 must be non-negative with a1 + a2 <= 1")


def katyusha_parameters(L_F: float, L_es: float, mu: float, rho: float) -> KatyushaParams:
    """Accelerated-recursion constants from the smoothness constants.

    ``L_F`` bounds the smoothness of ``F`` and ``L_es`` is the
    expected-smoothness constant of the variance-reduced oracle.
    """
    if not mu > 0:
        raise ConfigError("acceleration needs mu > 0")
    if not 0 < rho <= 1:
        raise ConfigError("anchor-refresh probability must lie in (0, 1]")
    top = max(L_F, L_es)
    eta = 1.0 / (4.0 * top)
    a2 = L_es / (2.0 * top)
    a1 = min(0.5, math.sqrt(eta * mu * max(0.5, a2 / rho)))
    b2 = 1.0 / max(2.0 * mu, 4.0 * a1 / eta)
    b1 = 1.0 - b2 * mu
    return KatyushaParams(eta=eta, a1=a1, a2=a2, b1=b1, b2=b2, rho=rho)


def tune_katyusha(profile: SmoothnessProfile, L_es: float, rho: float) -> KatyushaParams:
    return katyusha_parameters(profile.L_F, L_es, profile.mu, rho)


def tune_al2sgd_schedule(profile: SmoothnessProfile, rho: float | None = None) -> TunedSchedule:
    """Probabilities and ``tau`` minimizing the smoothness bound with the component constant.

    The returned ``eta`` is a placeholder for the plain schedule; the
    accelerated run takes its step from :func:`tune_katyusha`.
    """
    if not profile.mu > 0:
        raise ConfigError("tuning needs a strongly convex objective (mu > 0)")
    p0, pj, tau, bound = _tune(profile.C1, profile.C2, profile.L_tilde)
    return TunedSchedule(p0=p0, p=pj, tau=tau, eta=1.0 / (2.0 * bound), L_tilde=bound)


def vr_expected_smoothness(topo, pen, losses, sched) -> float:
    """Expected-smoothness constant of the variance-reduced oracle."""
    return expected_smoothness(topo, pen, losses, sched, component=True)


@dataclass
class KatyushaState:
    """Per-client iterates and the cached anchor information.

    ``anchor_grad`` is the full gradient of ``F`` at the anchors, built from
    the stored ``grad_fx`` and the anchor averages.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    grad_fx: np.ndarray
    xbar: np.ndarray
    xbar_cluster: np.ndarray  # (n, d): each client's cluster anchor average
    anchor_grad: np.ndarray

    @classmethod
    def start(cls, topo, pen, losses: LossBatch, x0=None) -> "KatyushaState":
        x = np.zeros((topo.n, losses.d)) if x0 is None else np.array(x0, dtype=float)
        st = cls(x=x, y=x.copy(), z=x.copy(), theta=x.copy(), grad_fx=None, xbar=None,
                 xbar_cluster=None, anchor_grad=None)
        st.refresh(x, topo, pen, losses, _Averager(topo, pen))
        return st

    def refresh(self, x_new, topo, pen, losses, avg: _Averager):
        self.x = x_new
        self.grad_fx = losses.grad(x_new)
        self.xbar = avg.network(x_new)
        self.xbar_cluster = avg.cluster(x_new)
        g = pen.gamma[:, None]
        a = pen.client_alpha(topo)[:, None]
        self.anchor_grad = (self.grad_fx + a * g * (x_new - self.xbar)
                            + (1 - a) * g * (x_new - self.xbar_cluster))


def _vr(st: KatyushaState, theta, topo, losses, sched, avg, co, xi0, xi, l):
    g = st.anchor_grad.copy()
    if xi0:
        dg = (theta - avg.network(theta)) - (st.x - st.xbar)
        dc = (theta - avg.cluster(theta)) - (st.x - st.xbar_cluster)
        g += co.g_net[:, None] * dg + co.g_clu_on_net[:, None] * dc
        return g
    on = xi[topo.cluster_of]
    if np.any(on):
        dc = (theta - avg.cluster(theta)) - (st.x - st.xbar_cluster)
        g[on] += co.g_clu[on, None] * dc[on]
    if not np.all(on):
        diff = losses.component_grad(theta, l) - losses.component_grad(st.x, l)
        g[~on] += co.local[~on, None] * diff[~on]
    return g


def vr_gradient_estimate(state: KatyushaState, stack, topo: NetworkTopology, pen: PenaltyConfig, losses,
                         sched: SchedulerConfig, xi0: int, xi=None, l=None) -> np.ndarray:
    """Variance-reduced stochastic gradient at ``stack`` for one draw of ``(xi0, xi, l)``.

    The network branch corrects both regularizers: besides the network
    term it carries ``gamma tau (1 - alpha) / p0`` times the cluster
    control variate, which keeps the estimate unbiased for any ``tau``.
    """
    losses = as_batch(losses)
    sched = sched.for_topology(topo)
    avg = _Averager(topo, pen)
    if not (np.allclose(state.xbar, avg.network(state.x), rtol=1e-12, atol=1e-12)
            and np.allclose(state.xbar_cluster, avg.cluster(state.x), rtol=1e-12, atol=1e-12)):
        raise StaleAnchorError("anchor averages were not recomputed after the anchors changed")
    xi = np.zeros(topo.k, dtype=bool) if xi is None else np.asarray(xi, dtype=bool).ravel()
    l = np.zeros(topo.n, dtype=np.intp) if l is None else np.asarray(l, dtype=np.intp)
    _branch_guard(sched, xi0, xi)
    return _vr(state, np.asarray(stack, float), topo, losses, sched, avg,
               _Coefficients(topo, pen, sched), xi0, xi, l)


@dataclass
class AcceleratedResult(RunResult):
    state: KatyushaState = None
    iterations: int = 0
    reached: bool = False  # early-stopping threshold met


def run_async_al2sgd_plus(topo: NetworkTopology, pen: PenaltyConfig, losses, sched: SchedulerConfig,
                          params: KatyushaParams, theta_hat: np.ndarray | None = None,
                          record_every: int = 1, objective_every: int | None = None,
                          stop_below: float | None = None) -> AcceleratedResult:
    """Run the accelerated schedule for at most ``sched.T`` iterations.

    With ``stop_below`` and ``theta_hat`` given, stops at the first
    iteration whose suboptimality ``F(y) - F(theta_hat)`` is at most
    ``stop_below``; ``iterations`` then holds that count. Trajectory
    distances and objectives are measured at ``y``.
    """
    losses = as_batch(losses)
    pen.validate_for(topo)
    sched = sched.for_topology(topo)
    if sched.mode != "async":
        raise ConfigError("the accelerated variant only supports the asynchronous schedule")
    if record_every < 1:
        raise ConfigError("record_every must be a positive integer")
    if stop_below is not None and theta_hat is None:
        raise ConfigError("early stopping needs the reference minimizer")
    avg, co = _Averager(topo, pen), _Coefficients(topo, pen, sched)
    st = KatyushaState.start(topo, pen, losses)
    f_hat = objective_value(theta_hat, topo, pen, losses) if theta_hat is not None else None
    coin0 = _rng.stream(sched.seed, "branch")
    coinj = _rng.stream(sched.seed, "cluster")
    comp = _rng.stream(sched.seed, "component")
    coina = _rng.stream(sched.seed, "anchor")
    comm = CommLog(k=topo.k)
    traj = TrajectoryRecord()
    a1, a2, b1, b2, eta = params.a1, params.a2, params.b1, params.b2, params.eta

    def log(t):
        if t % record_every:
            return None
        dist = float(np.sum((st.y - theta_hat) ** 2)) if theta_hat is not None else float("nan")
        want_obj = (objective_every and t % objective_every == 0) or stop_below is not None
        obj = objective_value(st.y, topo, pen, losses) if want_obj else float("nan")
        traj.record(t, dist, obj, comm)
        return obj

    log(0)
    prev0 = False
    prevj = np.zeros(topo.k, dtype=bool)
    done, reached = sched.T, False
    for t in range(1, sched.T + 1):
        theta = a1 * st.z + a2 * st.x + (1 - a1 - a2) * st.y
        xi0 = bool(coin0.random() < sched.p0)
        xi = coinj.random(topo.k) < sched.p
        l = losses.sample_components(comp)
        if xi0:
            comm.global_steps += 1
            if not prev0:
                comm.between_cluster_rounds += 1
        else:
            comm.cluster_steps += xi
            comm.local_steps += ~xi
            comm.within_cluster_rounds += xi & ~prevj
        prev0, prevj = xi0, xi
        g = _vr(st, theta, topo, losses, sched, avg, co, xi0, xi, l)
        y_new = theta - eta * g
        st.z = b1 * st.z + (1 - b1) * theta + (b2 / eta) * (y_new - theta)
        st.y = y_new
        st.theta = theta
        if coina.random() < params.rho:
            st.refresh(y_new.copy(), topo, pen, losses, avg)
            comm.anchor_refreshes += 1
        if not (np.isfinite(st.y).all() and np.isfinite(st.z).all()):
            raise DivergenceError("iterate is no longer finite", t)
        comm.T = t
        obj = log(t)
        if stop_below is not None:
            if obj is None:
                obj = objective_value(st.y, topo, pen, losses)
            if obj - f_hat <= stop_below:
                done, reached = t, True
                break
    comm.check()
    return AcceleratedResult(theta=st.y, comm=comm, trajectory=traj, state=st, iterations=done,
                             reached=reached)


def iteration_budget(L_es: float, mu: float, rho: float, eps: float, C: float = 20.0) -> float:
    """``C (1/rho + sqrt(L_es / (rho mu))) ln(1/eps)``."""
    return C * (1.0 / rho + math.sqrt(L_es / (rho * mu))) * math.log(1.0 / eps)
