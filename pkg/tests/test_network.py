import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcluster.errors import ConfigError, TopologyError, UndefinedAverageError
from fedcluster.network import (
    ClientDataset,
    LossBatch,
    NetworkTopology,
    PenaltyConfig,
    alpha_from_lambda,
    cluster_average,
    global_average,
    lambda_from_alpha,
    logistic_loss_oracle,
    quadratic_loss_oracle,
)

from conftest import central_diff


def test_topology_partition_and_ordering():
    topo = NetworkTopology(((0, 1), (2, 3, 4)))
    assert topo.n == 5 and topo.k == 2
    assert topo.cluster_of.tolist() == [0, 0, 1, 1, 1]
    with pytest.raises(TopologyError):
        NetworkTopology(((0, 1), (1, 2)))
    with pytest.raises(TopologyError):
        NetworkTopology(((0, 2),))
    with pytest.raises(TopologyError):
        NetworkTopology(((1, 0),))
    with pytest.raises(TopologyError):
        NetworkTopology(((0,), ()))
    with pytest.raises(TopologyError):
        NetworkTopology(())


@given(st.lists(st.integers(1, 5), min_size=1, max_size=6))
def test_from_sizes_partitions(sizes):
    topo = NetworkTopology.from_sizes(sizes)
    flat = [i for m in topo.members for i in m]
    assert sorted(flat) == list(range(sum(sizes)))
    assert topo.sizes().tolist() == sizes


def test_alpha_from_lambda_examples():
    assert alpha_from_lambda(0.0, [1.0, 2.0]) == 0.0
    assert alpha_from_lambda(1.0, np.ones(20)) == pytest.approx(1 / 21, abs=1e-15)
    assert abs(alpha_from_lambda(1e12, np.ones(20)) - 1) < 1e-10
    with pytest.raises(TopologyError):
        alpha_from_lambda(1.0, [])


@given(st.floats(0.0, 0.999), st.lists(st.floats(0.01, 10.0), min_size=1, max_size=8))
def test_lambda_alpha_roundtrip(alpha, gammas):
    lam = lambda_from_alpha(alpha, gammas)
    assert abs(alpha_from_lambda(lam, gammas) - alpha) < 1e-12


def test_penalty_lambda_consistency():
    topo = NetworkTopology.from_sizes([2, 3])
    pen = PenaltyConfig.from_lambda(topo, [1.0, 2.0], [1.0, 1.0, 2.0, 2.0, 2.0])
    pen.validate_for(topo)
    assert pen.alpha.tolist() == pytest.approx([1 / 3, 2 / 8])
    bad = PenaltyConfig(gamma=pen.gamma, alpha=[0.5, 0.5], lam=[1.0, 2.0])
    with pytest.raises(ConfigError):
        bad.validate_for(topo)
    with pytest.raises(ConfigError):
        PenaltyConfig(gamma=[1.0, -1.0], alpha=[0.5])
    with pytest.raises(ConfigError):
        PenaltyConfig(gamma=[1.0], alpha=[1.5])


def test_cluster_average_examples(rng):
    topo = NetworkTopology(((0, 1),))
    pen = PenaltyConfig(gamma=[1.0, 3.0], alpha=[1.0])
    assert cluster_average(np.array([[0.0], [4.0]]), topo, pen, 0)[0] == pytest.approx(3.0)
    v = rng.normal(size=3)
    assert np.allclose(cluster_average(np.tile(v, (2, 1)), topo, pen, 0), v, atol=1e-15)
    with pytest.raises(TopologyError):
        cluster_average(np.zeros((2, 1)), topo, pen, 1)


def test_averages_match_naive_sums(rng):
    topo = NetworkTopology.from_sizes([3, 2, 4])
    pen = PenaltyConfig(gamma=rng.uniform(0.1, 3, 9), alpha=rng.uniform(0, 1, 3))
    stack = rng.normal(size=(9, 5))
    for j, m in enumerate(topo.members):
        num = np.zeros(5)
        den = 0.0
        for i in m:
            num += pen.gamma[i] * stack[i]
            den += pen.gamma[i]
        assert np.allclose(cluster_average(stack, topo, pen, j), num / den, rtol=1e-12, atol=1e-12)
    num = np.zeros(5)
    den = 0.0
    for j, m in enumerate(topo.members):
        for i in m:
            num += pen.alpha[j] * pen.gamma[i] * stack[i]
            den += pen.alpha[j] * pen.gamma[i]
    assert np.allclose(global_average(stack, topo, pen), num / den, rtol=1e-12, atol=1e-12)


def test_global_average_reductions(rng):
    topo = NetworkTopology.from_sizes([4])
    pen = PenaltyConfig(gamma=rng.uniform(0.5, 2, 4), alpha=[1.0])
    stack = rng.normal(size=(4, 3))
    assert np.allclose(global_average(stack, topo, pen), cluster_average(stack, topo, pen, 0))
    zero = PenaltyConfig(gamma=np.ones(4), alpha=[0.0])
    with pytest.raises(UndefinedAverageError):
        global_average(stack, topo, zero)


@settings(max_examples=30)
@given(st.floats(-3, 3).filter(lambda a: abs(a) > 1e-3), st.integers(0, 2 ** 31))
def test_averages_affine_equivariant(a, seed):
    g = np.random.default_rng(seed)
    topo = NetworkTopology.from_sizes([2, 3])
    pen = PenaltyConfig(gamma=g.uniform(0.1, 2, 5), alpha=g.uniform(0.1, 1, 2))
    stack = g.normal(size=(5, 3))
    b = g.normal(size=3)
    moved = a * stack + b
    for j in range(2):
        assert np.allclose(cluster_average(moved, topo, pen, j), a * cluster_average(stack, topo, pen, j) + b,
                           atol=1e-12)
    assert np.allclose(global_average(moved, topo, pen), a * global_average(stack, topo, pen) + b, atol=1e-12)


def test_quadratic_loss_examples():
    f = quadratic_loss_oracle(ClientDataset(np.eye(2), [1.0, 0.0], 1.0))
    assert f.value(np.zeros(2)) == 0.5
    assert f.grad(np.zeros(2)).tolist() == [-1.0, 0.0]
    assert f.value(np.array([1.0, 0.0])) == 0.0
    assert np.all(f.grad(np.array([1.0, 0.0])) == 0)
    assert f.smoothness() == pytest.approx(1.0) and f.strong_convexity() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        quadratic_loss_oracle(ClientDataset(np.eye(2), [1.0, 0.0]))


def test_logistic_loss_examples():
    f = logistic_loss_oracle(ClientDataset(np.ones((1, 1)), [1.0]), ridge=0.0)
    assert f.value(np.zeros(1)) == pytest.approx(np.log(2), abs=1e-15)
    vals = [f.value(np.array([t])) for t in (0.0, 1.0, 5.0, 20.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ConfigError):
        logistic_loss_oracle(ClientDataset(np.ones((2, 1)), [1.0, 2.0]))


def test_dataset_validation():
    with pytest.raises(ConfigError):
        ClientDataset(np.ones((3, 2)), np.ones(2))
    with pytest.raises(ConfigError):
        ClientDataset(np.ones((3, 2)), np.ones(3), noise_var=0.0)


def _random_losses(g):
    out = []
    for kind in ("quad", "logit"):
        for _ in range(2):
            n, d = int(g.integers(2, 7)), 3
            X = g.normal(size=(n, d))
            if kind == "quad":
                out.append(quadratic_loss_oracle(ClientDataset(X, g.normal(size=n), float(g.uniform(0.5, 2)))))
            else:
                out.append(logistic_loss_oracle(ClientDataset(X, (g.random(n) < 0.5).astype(float)), ridge=0.1))
    return out


@pytest.mark.parametrize("seed", range(3))
def test_loss_oracle_contract(seed):
    g = np.random.default_rng(seed)
    for f in _random_losses(g):
        theta = g.normal(size=f.dim)
        fd = central_diff(f.value, theta)
        assert np.allclose(f.grad(theta), fd, rtol=1e-5, atol=1e-7)
        comp = np.mean([f.component_grad(theta, l) for l in range(f.n_components())], axis=0)
        assert np.allclose(comp, f.grad(theta), rtol=0, atol=1e-10)
        assert f.strong_convexity() <= f.smoothness()
        other = g.normal(size=f.dim)
        assert f.value(0.5 * (theta + other)) <= 0.5 * (f.value(theta) + f.value(other)) + 1e-12


def test_smoothness_constants_bound_curvature(rng):
    X = rng.normal(size=(6, 3))
    f = quadratic_loss_oracle(ClientDataset(X, rng.normal(size=6), 2.0))
    eig = np.linalg.eigvalsh(X.T @ X / 2.0)
    assert f.smoothness() == pytest.approx(eig[-1]) and f.strong_convexity() == pytest.approx(eig[0])
    comp_curv = [6 * X[l] @ X[l] / 2.0 for l in range(6)]
    assert f.component_smoothness() == pytest.approx(max(comp_curv))
    wide = quadratic_loss_oracle(ClientDataset(rng.normal(size=(2, 4)), rng.normal(size=2), 1.0))
    assert wide.strong_convexity() == 0.0


def test_batch_matches_per_client(rng):
    losses = _random_losses(rng)[:2]
    batch = LossBatch(losses)
    stack = rng.normal(size=(2, 3))
    assert batch.quadratic
    assert np.allclose(batch.values(stack), [f.value(t) for f, t in zip(losses, stack)], rtol=1e-13)
    assert np.allclose(batch.grad(stack), [f.grad(t) for f, t in zip(losses, stack)], rtol=1e-13)
    idx = np.array([1, 0])
    assert np.allclose(batch.component_grad(stack, idx),
                       [f.component_grad(t, l) for f, t, l in zip(losses, stack, idx)], rtol=1e-13)
    mixed = LossBatch(_random_losses(rng))
    assert not mixed.quadratic and not mixed.logistic
    with pytest.raises(IndexError):
        batch.component_grad(stack, np.array([100, 0]))
