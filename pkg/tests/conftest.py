import numpy as np
import pytest

from fedcluster.instances import random_quadratic_instance


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def quadratic_from_values(f, dim):
    """Hessian and gradient-at-zero of an exactly quadratic function, from values only.

    H_kl = f(e_k + e_l) - f(e_k) - f(e_l) + f(0); g_k = f(e_k) - f(0) - H_kk / 2.
    """
    f0 = f(np.zeros(dim))
    fe = np.array([f(np.eye(dim)[k]) for k in range(dim)])
    H = np.empty((dim, dim))
    for k in range(dim):
        for l in range(k, dim):
            H[k, l] = H[l, k] = f(np.eye(dim)[k] + np.eye(dim)[l]) - fe[k] - fe[l] + f0
    g = fe - f0 - 0.5 * np.diag(H)
    return H, g


@pytest.fixture
def small_instance():
    return random_quadratic_instance(sizes=(4, 4, 4), d=4, n_obs=8, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def cached_monte_carlo(keys, evaluate):
    """Mean and standard error of ``evaluate(key)`` over the sampled ``keys``.

    ``keys`` is an (N, m) integer array of draws; each distinct row is
    evaluated once. Returns arrays shaped like ``evaluate``'s output.
    """
    keys = np.asarray(keys)
    uniq, counts = np.unique(keys, axis=0, return_counts=True)
    N = keys.shape[0]
    values = np.array([evaluate(tuple(u)) for u in uniq])
    w = (counts / N).reshape((-1,) + (1,) * (values.ndim - 1))
    mean = np.sum(w * values, axis=0)
    second = np.sum(w * values ** 2, axis=0)
    se = np.sqrt(np.maximum(second - mean ** 2, 0.0) / N)
    return mean, se


def async_draws(rng, N, p0, p):
    """(N, 1 + k) coin draws; cluster coins are zeroed on heads rounds (they are unused)."""
    p = np.atleast_1d(p)
    xi0 = rng.random(N) < p0
    xi = (rng.random((N, p.size)) < p) & ~xi0[:, None]
    return np.column_stack([xi0, xi]).astype(int)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Log one acceptance criterion; the lines are repeated in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
