import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcluster.errors import ConfigError, DivergenceError, ScheduleError
from fedcluster.instances import random_quadratic_instance
from fedcluster.l2gd import (
    CommLog,
    SchedulerConfig,
    branch_probabilities,
    expected_comm_rounds,
    expected_smoothness,
    gradient_oracle,
    iterations_to_reach,
    optimal_tau,
    optimal_taus,
    oracle_difference_moment,
    oracle_mean,
    residual_variance,
    run_async_l2gd,
    simple_safe_step,
    tau_variance_coefficient,
    tune_schedule,
    variance_bound,
)
from fedcluster.network import (
    ClientDataset,
    LossBatch,
    NetworkTopology,
    PenaltyConfig,
    QuadraticLoss,
    cluster_averages,
    global_average,
)
from fedcluster.objective import (
    SmoothnessProfile,
    grad_objective,
    objective_value,
    reference_minimizer,
    regularizer_grads,
    smoothness_profile,
)

from conftest import async_draws, cached_monte_carlo


def _sched(p0, p, eta=0.01, T=100, seed=0):
    p = np.atleast_1d(np.asarray(p, dtype=float))
    return SchedulerConfig(p0=p0, p=p, tau=optimal_taus(p0, p), eta=eta, T=T, seed=seed)


def _naive_oracle(stack, topo, pen, losses, sched, xi0, xi):
    """Client-by-client transcription of the three-case oracle."""
    cbar = cluster_averages(stack, topo, pen)
    gbar = global_average(stack, topo, pen)
    out = np.zeros_like(stack)
    for i in range(topo.n):
        j = topo.cluster_of[i]
        g, a, tau, p0, pj = pen.gamma[i], pen.alpha[j], sched.tau[j], sched.p0, sched.p[j]
        if xi0:
            out[i] = g * a / p0 * (stack[i] - gbar) + g * tau * (1 - a) / p0 * (stack[i] - cbar[j])
        elif xi[j]:
            out[i] = g * (1 - tau) * (1 - a) / ((1 - p0) * pj) * (stack[i] - cbar[j])
        else:
            out[i] = losses.losses[i].grad(stack[i]) / ((1 - p0) * (1 - pj))
    return out


# --------------------------------------------------------------------------
# tau and tuning


def test_optimal_tau_examples():
    assert optimal_tau(0.3, 0.0) == 1.0
    assert optimal_tau(0.5, 0.5) == 0.5
    assert optimal_tau(0.2, 0.1) == pytest.approx(0.2 / 0.36, rel=1e-15)
    with pytest.raises(ScheduleError):
        optimal_tau(0.0, 0.0)


@given(st.floats(0.01, 0.99), st.one_of(st.just(0.0), st.floats(1e-3, 0.99)))
def test_optimal_tau_minimizes_variance_coefficient(p0, pj):
    tau = optimal_tau(p0, pj)
    assert 0 <= tau <= 1
    if pj == 0:
        return
    best = tau_variance_coefficient(p0, pj, tau)
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        assert best <= tau_variance_coefficient(p0, pj, t) * (1 + 1e-12)


def test_tune_schedule_examples():
    t = tune_schedule(SmoothnessProfile(C1=1, C2=2, L_f=7, mu=1))
    assert (t.p0, t.p, t.tau, t.L_tilde) == (pytest.approx(0.2), pytest.approx(0.125), pytest.approx(0.5), 10)
    assert t.eta == pytest.approx(1 / 20)
    t = tune_schedule(SmoothnessProfile(C1=3, C2=1, L_f=4, mu=1))
    assert (t.p0, t.p, t.tau, t.L_tilde) == (pytest.approx(0.6), 0.0, 1.0, 10)
    t = tune_schedule(SmoothnessProfile(C1=2, C2=0, L_f=4, mu=1))
    assert t.p == 0.0 and t.tau == 1.0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        t = tune_schedule(SmoothnessProfile(C1=0, C2=0, L_f=4, mu=1))
    assert caught and t.p0 == 0 and t.p == 0
    with pytest.raises(ConfigError):
        tune_schedule(SmoothnessProfile(C1=1, C2=1, L_f=1, mu=0))


@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 10))
def test_tuned_tau_is_c1_over_c2(C1, C2, L):
    t = tune_schedule(SmoothnessProfile(C1=C1, C2=C2, L_f=L, mu=0.1))
    if C2 > C1:
        assert t.tau == pytest.approx(C1 / C2, rel=1e-12)
    else:
        assert t.tau == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_expected_smoothness_below_tuned_bound(seed):
    inst = random_quadratic_instance(sizes=(3, 2, 4), d=3, seed=seed, alpha=(0.0, 1.0))
    prof = smoothness_profile(inst.topo, inst.pen, inst.losses)
    tuned = tune_schedule(prof)
    L = expected_smoothness(inst.topo, inst.pen, inst.losses, tuned.to_config(3))
    assert L <= tuned.L_tilde * (1 + 1e-12)


# --------------------------------------------------------------------------
# oracle


def test_oracle_matches_three_case_formula(small_instance, rng):
    inst = small_instance
    sched = _sched(0.3, [0.2, 0.5, 0.7])
    stack = rng.normal(size=(12, 4))
    for xi0 in (0, 1):
        for bits in range(8):
            xi = [(bits >> j) & 1 for j in range(3)]
            got = gradient_oracle(stack, inst.topo, inst.pen, inst.losses, sched, xi0, xi)
            want = _naive_oracle(stack, inst.topo, inst.pen, inst.losses, sched, xi0, xi)
            assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_oracle_examples(small_instance, rng):
    inst = small_instance
    sched = _sched(0.3, 0.4)
    v = np.tile(rng.normal(size=4), (12, 1))
    assert np.allclose(gradient_oracle(v, inst.topo, inst.pen, inst.losses, sched, 1, None), 0, atol=1e-12)
    topo = NetworkTopology.from_sizes([1])
    loss = LossBatch([QuadraticLoss(ClientDataset(np.eye(2), np.array([1.0, -2.0]), 1.0))])
    sched0 = SchedulerConfig(p0=0.0, p=[0.0], tau=[0.0], eta=0.1)
    theta = rng.normal(size=(1, 2))
    got = gradient_oracle(theta, topo, PenaltyConfig.uniform(topo, 1.0, 0.5), loss, sched0, 0, [0])
    assert np.allclose(got, loss.grad(theta))


def test_oracle_branch_guards(small_instance):
    inst = small_instance
    stack = np.zeros((12, 4))
    with pytest.raises(ScheduleError):
        gradient_oracle(stack, inst.topo, inst.pen, inst.losses, _sched(0.0, 0.5), 1)
    with pytest.raises(ScheduleError):
        gradient_oracle(stack, inst.topo, inst.pen, inst.losses, _sched(1.0, 0.5), 0, [0, 0, 0])
    with pytest.raises(ScheduleError):
        gradient_oracle(stack, inst.topo, inst.pen, inst.losses, _sched(0.5, [0.0, 0.5, 0.5]), 0, [1, 0, 0])
    with pytest.raises(ScheduleError):
        gradient_oracle(stack, inst.topo, inst.pen, inst.losses, _sched(0.5, [1.0, 0.5, 0.5]), 0, [0, 0, 0])
    with pytest.raises(ConfigError):
        gradient_oracle(stack, inst.topo, inst.pen, inst.losses, _sched(0.5, 0.5), 0, [0, 0])


@pytest.mark.parametrize("seed", range(3))
def test_oracle_monte_carlo_unbiased(seed):
    inst = random_quadratic_instance(sizes=(3, 2, 3), d=3, seed=seed)
    g = np.random.default_rng(seed)
    p0, p = g.uniform(0.1, 0.6), g.uniform(0.1, 0.9, size=3)
    sched = _sched(p0, p)
    stack = g.normal(size=(8, 3))
    keys = async_draws(g, 100_000, p0, p)
    mean, se = cached_monte_carlo(
        keys, lambda k: gradient_oracle(stack, inst.topo, inst.pen, inst.losses, sched, k[0], k[1:]))
    exact = grad_objective(stack, inst.topo, inst.pen, inst.losses)
    assert np.all(np.abs(mean - exact) <= 4 * se + 1e-12)
    assert np.allclose(oracle_mean(stack, inst.topo, inst.pen, inst.losses, sched), exact, atol=1e-10)


def test_simple_mode_unbiased(small_instance, rng):
    inst = small_instance
    sched = SchedulerConfig.simple(p=0.3, eta=0.01, k=3)
    stack = rng.normal(size=(12, 4))
    keys = (rng.random((100_000, 1)) < 0.3).astype(int)
    mean, se = cached_monte_carlo(
        keys, lambda k: gradient_oracle(stack, inst.topo, inst.pen, inst.losses, sched, k[0]))
    exact = grad_objective(stack, inst.topo, inst.pen, inst.losses)
    assert np.all(np.abs(mean - exact) <= 4 * se + 1e-12)
    assert np.allclose(oracle_mean(stack, inst.topo, inst.pen, inst.losses, sched), exact, atol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_variance_bound_monte_carlo(seed):
    inst = random_quadratic_instance(sizes=(3, 3), d=2, seed=seed)
    g = np.random.default_rng(100 + seed)
    p0, p = g.uniform(0.1, 0.6), g.uniform(0.1, 0.9, size=2)
    sched = _sched(p0, p)
    a, b = g.normal(size=(6, 2)), g.normal(size=(6, 2))
    keys = async_draws(g, 100_000, p0, p)

    def sqdiff(k):
        ga = gradient_oracle(a, inst.topo, inst.pen, inst.losses, sched, k[0], k[1:])
        gb = gradient_oracle(b, inst.topo, inst.pen, inst.losses, sched, k[0], k[1:])
        return np.sum((ga - gb) ** 2)

    mean, se = cached_monte_carlo(keys, sqdiff)
    rhs = variance_bound(a, b, inst.topo, inst.pen, inst.losses, sched)
    exact = oracle_difference_moment(a, b, inst.topo, inst.pen, inst.losses, sched)
    assert mean <= rhs + 4 * se
    assert abs(mean - exact) <= 4 * se
    assert exact <= rhs * (1 + 1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_expected_smoothness_inequality(seed):
    inst = random_quadratic_instance(sizes=(2, 3, 2), d=3, seed=seed)
    topo, pen, losses = inst.topo, inst.pen, inst.losses
    g = np.random.default_rng(seed)
    sched = _sched(g.uniform(0.1, 0.7), g.uniform(0.0, 0.9, size=3))
    theta_hat = reference_minimizer(topo, pen, losses)
    L = expected_smoothness(topo, pen, losses, sched)
    f_hat = objective_value(theta_hat, topo, pen, losses)
    for _ in range(5):
        th = theta_hat + g.normal(size=theta_hat.shape) * g.uniform(0.1, 3)
        lhs = oracle_difference_moment(th, theta_hat, topo, pen, losses, sched)
        assert lhs <= 2 * L * (objective_value(th, topo, pen, losses) - f_hat) * (1 + 1e-10)


# --------------------------------------------------------------------------
# constants


def _toy(n=2, gamma=1.0, alpha=0.5):
    topo = NetworkTopology.from_sizes([n, n])
    losses = LossBatch([QuadraticLoss(ClientDataset(np.eye(2), np.full(2, float(i)), 1.0))
                        for i in range(2 * n)])
    return topo, PenaltyConfig.uniform(topo, gamma, alpha), losses


def test_expected_smoothness_examples():
    topo, pen, losses = _toy()
    sched = _sched(0.25, 0.25)
    terms = [2 * 0.5 * 1 / 0.25, 2 * 0.5 * 1 / (0.25 + 2 * 0.75 * 0.25), 1 / (0.75 * 0.75)]
    assert expected_smoothness(topo, pen, losses, sched) == pytest.approx(max(terms), rel=1e-14)
    pen1 = PenaltyConfig.uniform(topo, 1.5, 1.0)
    sched1 = _sched(0.4, 0.0)
    assert expected_smoothness(topo, pen1, losses, sched1) == pytest.approx(max(2 * 1.5 / 0.4, 1 / 0.6))
    with pytest.raises(ScheduleError):
        expected_smoothness(topo, pen, losses, _sched(0.3, 1.0))
    with pytest.raises(ScheduleError):
        expected_smoothness(topo, pen, losses, SchedulerConfig(p0=0.3, p=[0.2, 0.2], tau=[0.5, 0.5], eta=1.0))


def test_residual_variance_examples(rng):
    topo, _, losses = _toy()
    free = PenaltyConfig.uniform(topo, 0.0, 0.5)
    theta_hat = reference_minimizer(topo, free, losses)
    assert residual_variance(theta_hat, topo, free, losses, _sched(0.3, 0.2)) == pytest.approx(0, abs=1e-20)

    inst = random_quadratic_instance(sizes=(5,), d=3, seed=3, alpha=1.0)
    topo, pen, losses = inst.topo, inst.pen, inst.losses
    theta_hat = reference_minimizer(topo, pen, losses)
    _, gphi = regularizer_grads(theta_hat, topo, pen)
    want = 2 / 0.4 * np.sum(gphi ** 2) + np.sum(losses.grad(theta_hat) ** 2) / 0.6
    assert residual_variance(theta_hat, topo, pen, losses, _sched(0.4, 0.0)) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_residual_variance_brute_force(seed):
    inst = random_quadratic_instance(sizes=(2, 3, 2), d=2, seed=seed)
    topo, pen, losses = inst.topo, inst.pen, inst.losses
    g = np.random.default_rng(seed)
    p0, p = g.uniform(0.1, 0.7), g.uniform(0.0, 0.9, size=3)
    sched = _sched(p0, p)
    th = reference_minimizer(topo, pen, losses)
    cbar = cluster_averages(th, topo, pen)
    gbar = global_average(th, topo, pen)
    phi = sum(np.sum((pen.client_alpha(topo)[i] * pen.gamma[i] * (th[i] - gbar)) ** 2) for i in range(topo.n))
    want = 2 / p0 * phi
    for j, m in enumerate(topo.members):
        psi = sum(np.sum((pen.gamma[i] * (th[i] - cbar[j])) ** 2) for i in m)
        want += 2 * (1 - pen.alpha[j]) ** 2 * psi / (p0 + 2 * (1 - p0) * p[j])
        want += sum(np.sum(losses.losses[i].grad(th[i]) ** 2) for i in m) / ((1 - p0) * (1 - p[j]))
    assert residual_variance(th, topo, pen, losses, sched) == pytest.approx(want, rel=1e-10)


# --------------------------------------------------------------------------
# runs


def test_run_is_deterministic_and_logs_consistently(small_instance):
    inst = small_instance
    sched = _sched(0.3, [0.2, 0.5, 0.7], eta=0.01, T=500, seed=9)
    r1 = run_async_l2gd(inst.topo, inst.pen, inst.losses, sched)
    r2 = run_async_l2gd(inst.topo, inst.pen, inst.losses, sched)
    assert np.array_equal(r1.theta, r2.theta)
    assert r1.comm.as_dict() == r2.comm.as_dict()
    r1.comm.check()
    r3 = run_async_l2gd(inst.topo, inst.pen, inst.losses, SchedulerConfig(**{**sched.__dict__, "seed": 10}))
    assert not np.array_equal(r1.theta, r3.theta)


def test_commlog_check_catches_mismatch():
    log = CommLog(k=2, T=3, global_steps=1, cluster_steps=np.array([1, 0]), local_steps=np.array([1, 2]))
    log.check()
    log.local_steps[0] = 0
    with pytest.raises(AssertionError):
        log.check()


def test_trajectory_lengths(small_instance):
    inst = small_instance
    theta_hat = reference_minimizer(inst.topo, inst.pen, inst.losses)
    sched = _sched(0.3, 0.4, eta=0.01, T=95)
    res = run_async_l2gd(inst.topo, inst.pen, inst.losses, sched, theta_hat=theta_hat, record_every=10,
                         objective_every=20)
    tr = res.trajectory
    assert tr.iters == list(range(0, 96, 10))
    assert len(tr.dist_sq) == len(tr.objective) == len(tr.between_rounds) == 10
    assert np.isfinite(tr.objective[2]) and np.isnan(tr.objective[1])
    assert tr.dist_sq[0] == pytest.approx(np.sum(theta_hat ** 2))
    assert iterations_to_reach(tr, -1.0) == np.inf
    with pytest.raises(ConfigError):
        run_async_l2gd(inst.topo, inst.pen, inst.losses, sched, record_every=0)


def test_decoupled_run_reaches_local_minimizers(small_instance):
    inst = small_instance
    free = PenaltyConfig.uniform(inst.topo, 0.0, 0.5)
    L = float(np.max(inst.losses.smoothness()))
    sched = _sched(0.3, 0.2, eta=0.56 / L, T=6000)
    res = run_async_l2gd(inst.topo, free, inst.losses, sched)
    for f, t in zip(inst.losses.losses, res.theta):
        assert np.allclose(t, f.minimizer(), atol=1e-6)


def test_single_cluster_reduction(rng):
    inst = random_quadratic_instance(sizes=(3, 3), d=2, seed=1, alpha=1.0)
    sched = _sched(0.4, 0.0, eta=0.01, T=300)
    stack = rng.normal(size=(6, 2))
    gbar = global_average(stack, inst.topo, inst.pen)
    got = gradient_oracle(stack, inst.topo, inst.pen, inst.losses, sched, 1)
    assert np.allclose(got, inst.pen.gamma[:, None] / 0.4 * (stack - gbar))
    res = run_async_l2gd(inst.topo, inst.pen, inst.losses, sched)
    assert res.comm.cluster_steps.sum() == 0 and res.comm.within_cluster_rounds.sum() == 0


def test_combined_step_update_formula(small_instance, rng):
    inst = small_instance
    topo, pen = inst.topo, inst.pen
    sched = _sched(1.0, [0.3] * 3, eta=0.05, T=1)
    theta0 = rng.normal(size=(12, 4))
    res = run_async_l2gd(topo, pen, inst.losses, sched, theta0=theta0)
    cbar = cluster_averages(theta0, topo, pen)[topo.cluster_of]
    gbar = global_average(theta0, topo, pen)
    a = pen.client_alpha(topo)[:, None]
    tau = sched.tau[topo.cluster_of][:, None]
    g = pen.gamma[:, None]
    want = (1 - 0.05 * g * (a + tau * (1 - a))) * theta0 + 0.05 * g * (a * gbar + tau * (1 - a) * cbar)
    assert np.allclose(res.theta, want, atol=1e-12)


def test_divergence_and_safe_step(small_instance):
    inst = small_instance
    with pytest.raises(DivergenceError) as info:
        run_async_l2gd(inst.topo, inst.pen, inst.losses, _sched(0.3, 0.4, eta=1e3, T=2000))
    assert info.value.iteration > 0
    sched = _sched(0.3, 0.4, eta=10.0, T=10)
    with pytest.raises(ScheduleError):
        run_async_l2gd(inst.topo, inst.pen, inst.losses, SchedulerConfig(**{**sched.__dict__, "safe_step": True}))


def test_config_validation():
    with pytest.raises(ConfigError):
        SchedulerConfig(p0=1.2, p=[0.1], tau=[0.1], eta=0.1)
    with pytest.raises(ConfigError):
        SchedulerConfig(p0=0.2, p=[0.1], tau=[0.1], eta=0.0)
    with pytest.raises(ConfigError):
        SchedulerConfig(p0=0.2, p=[0.1], tau=[0.1, 0.2], eta=0.1)
    with pytest.raises(ConfigError):
        SchedulerConfig(p0=0.2, p=[0.1], tau=[0.1], eta=0.1, mode="sync")
    with pytest.raises(ConfigError):
        SchedulerConfig(p0=0.2, p=[0.1, 0.2], tau=[0.1, 0.2], eta=0.1).for_topology(NetworkTopology.from_sizes([1] * 3))


def test_communication_frequencies(small_instance):
    inst = small_instance
    p0, p = 0.3, np.array([0.2, 0.5, 0.8])
    T = 10_000
    res = run_async_l2gd(inst.topo, inst.pen, inst.losses, _sched(p0, p, eta=1e-3, T=T, seed=4))
    eb, ew = expected_comm_rounds(_sched(p0, p, T=T))
    q = p0 * (1 - p0)
    assert abs(res.comm.between_cluster_rounds - eb) <= 4 * np.sqrt(T * q * (1 - q) - 2 * (T - 1) * q * q) + 1
    for j in range(3):
        qj = (1 - p0) * p[j] * (1 - p[j])
        sd = np.sqrt(T * qj * (1 - qj) - 2 * (T - 1) * qj * qj)
        assert abs(res.comm.within_cluster_rounds[j] - ew[j]) <= 4 * sd + 1
    q0, q1, q2 = branch_probabilities(inst.topo, _sched(p0, p))
    assert abs(res.comm.global_steps - T * p0) <= 4 * np.sqrt(T * p0 * (1 - p0))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 1.0, allow_subnormal=False),
       st.lists(st.floats(0.0, 1.0, allow_subnormal=False), min_size=2, max_size=2), st.integers(0, 100))
def test_one_branch_per_iteration(p0, p, seed):
    topo = NetworkTopology.from_sizes([1, 2])
    losses = LossBatch([QuadraticLoss(ClientDataset(np.eye(1), [1.0], 1.0))] * 3)
    pen = PenaltyConfig.uniform(topo, 0.5, 0.5)
    sched = SchedulerConfig(p0=p0, p=p, tau=[0.5, 0.5], eta=1e-3, T=50, seed=seed)
    res = run_async_l2gd(topo, pen, losses, sched, record_every=50)
    assert np.all(res.comm.global_steps + res.comm.cluster_steps + res.comm.local_steps == 50)
    assert res.comm.between_cluster_rounds <= res.comm.global_steps


def test_simple_mode_converges_near_minimizer(small_instance):
    inst = small_instance
    eta = simple_safe_step(inst.topo, inst.pen, inst.losses, 0.2)
    sched = SchedulerConfig.simple(p=0.2, eta=eta * 0.1, T=20_000, seed=3, k=3)
    theta_hat = reference_minimizer(inst.topo, inst.pen, inst.losses)
    res = run_async_l2gd(inst.topo, inst.pen, inst.losses, sched, theta_hat=theta_hat, record_every=1000)
    assert res.trajectory.dist_sq[-1] < 0.05 * res.trajectory.dist_sq[0]
    assert res.comm.cluster_steps.sum() == 0
