"""Hierarchical linear model: sampling, the penalized estimator and baselines.

Model (per coordinate, isotropic)::

    tbar_j* = tbar*   + N(0, s_bar^2)        cluster centers
    theta_i* = tbar_j* + N(0, s_j^2)          client parameters
    y_i      = X_i theta_i* + N(0, s_i^2 I)   client data

The penalized estimator minimizes

    sum_i ||y_i - X_i theta_i||^2 / (2 s_i^2)
      + sum_j [sum_{i in I_j} gamma_i/2 ||theta_i - w_j||^2 + lam_j/2 ||w_j - wbar||^2]

and with ``lam_j = 1/s_bar^2``, ``gamma_i = 1/s_j^2`` it is the best linear
unbiased estimator of each ``theta_i*``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import rng as _rng
from .errors import ConfigError, SolverError
from .network import ClientDataset, LossBatch, NetworkTopology, PenaltyConfig, QuadraticLoss

DESIGNS = ("gaussian", "identity", "orthogonal")
PINV_RCOND = 1e-12


def _per(value, size, name):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (size,)).copy() if np.ndim(value) == 0 \
        else np.asarray(value, dtype=float).ravel()
    if arr.shape != (size,):
        raise ConfigError(f"{name} needs {size} entries, got {arr.size}")
    return arr


@dataclass(frozen=True)
class HlmSpec:
    """Sizes and variances of the model.

    ``m`` is the number of rows per client (scalar or one per client).
    ``design`` picks the row distribution: i.i.d. standard normal,
    ``identity`` (``X_i = I_d``; needs ``m = d``), or ``orthogonal``
    (``X_i = sqrt(m) Q`` with orthonormal columns, so ``X_i^T X_i = m I``).
    Zero variances are allowed for sampling; the estimators that need the
    variances reject them.
    """

    d: int = 20
    cluster_sizes: tuple = (20,) * 20
    sigma_bar_sq: float = 1.0
    sigma_j_sq: object = 1.0
    sigma_i_sq: object = 1.0
    theta_star_bar: object = None
    m: object = 10
    design: str = "gaussian"

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("dimension must be at least 1")
        sizes = tuple(int(s) for s in np.atleast_1d(self.cluster_sizes))
        if not sizes or min(sizes) < 1:
            raise ConfigError("cluster sizes must be positive")
        object.__setattr__(self, "cluster_sizes", sizes)
        if self.design not in DESIGNS:
            raise ConfigError(f"unknown design {self.design!r}; expected one of {DESIGNS}")
        sj = _per(self.sigma_j_sq, self.k, "sigma_j_sq")
        si = _per(self.sigma_i_sq, self.n, "sigma_i_sq")
        m = _per(self.m, self.n, "m").astype(int)
        if self.sigma_bar_sq < 0 or np.any(sj < 0) or np.any(si < 0):
            raise ConfigError("variances must be non-negative")
        if np.any(m < 1):
            raise ConfigError("every client needs at least one observation")
        if self.design == "identity" and np.any(m != self.d):
            raise ConfigError("identity designs need m = d rows")
        if self.design == "orthogonal" and np.any(m < self.d):
            raise ConfigError("orthogonal designs need m >= d rows")
        tb = np.zeros(self.d) if self.theta_star_bar is None else _per(self.theta_star_bar, self.d, "theta_star_bar")
        for name, val in (("sigma_j_sq", sj), ("sigma_i_sq", si), ("m", m), ("theta_star_bar", tb)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def k(self) -> int:
        return len(self.cluster_sizes)

    @property
    def n(self) -> int:
        return int(sum(self.cluster_sizes))

    def topology(self) -> NetworkTopology:
        return NetworkTopology.from_sizes(self.cluster_sizes)


@dataclass
class HlmSample:
    spec: HlmSpec
    topo: NetworkTopology
    centers: np.ndarray  # (k, d) true cluster centers
    theta: np.ndarray  # (n, d) true client parameters
    X: list
    y: list

    def losses(self, noise_var=None) -> LossBatch:
        """Client losses ``||y - X theta||^2 / (2 s_i^2)``.

        ``noise_var`` overrides the spec's noise variances; clients whose
        variance is zero fall back to 1 (the minimizer of a noise-free fit
        does not depend on the scale).
        """
        s2 = self.spec.sigma_i_sq if noise_var is None else _per(noise_var, self.topo.n, "noise_var")
        s2 = np.where(s2 > 0, s2, 1.0)
        return LossBatch([QuadraticLoss(ClientDataset(X, y, v)) for X, y, v in zip(self.X, self.y, s2)])


@dataclass
class EstimatorResult:
    method: str
    estimates: np.ndarray
    sq_errors: np.ndarray
    clients: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.clients is None:
            self.clients = np.arange(self.estimates.shape[0])
        if not np.all(np.isfinite(self.estimates)):
            raise SolverError(f"{self.method}: estimate is not finite")

    @property
    def mean_sq_error(self) -> float:
        return float(np.mean(self.sq_errors))


def _result(method, est, sample: HlmSample | None, clients=None, **extra):
    est = np.atleast_2d(np.asarray(est, dtype=float))
    idx = np.arange(est.shape[0]) if clients is None else np.asarray(clients)
    if sample is None:
        err = np.full(est.shape[0], np.nan)
    else:
        err = np.sum((est - sample.theta[idx]) ** 2, axis=1)
    return EstimatorResult(method=method, estimates=est, sq_errors=err, clients=idx, extra=extra)


# --------------------------------------------------------------------------
# sampling


def _design(spec: HlmSpec, m: int, g: np.random.Generator) -> np.ndarray:
    if spec.design == "identity":
        return np.eye(spec.d)
    Z = g.standard_normal((m, spec.d))
    if spec.design == "gaussian":
        return Z
    Q, _ = np.linalg.qr(Z)
    return np.sqrt(m) * Q


def generate_hlm(spec: HlmSpec, seed: int) -> HlmSample:
    """One draw of the model; each level uses its own named stream."""
    topo = spec.topology()
    gc = _rng.stream(seed, "hlm-centers")
    gt = _rng.stream(seed, "hlm-clients")
    gx = _rng.stream(seed, "hlm-design")
    ge = _rng.stream(seed, "hlm-noise")
    centers = spec.theta_star_bar + np.sqrt(spec.sigma_bar_sq) * gc.standard_normal((spec.k, spec.d))
    sj = np.sqrt(spec.sigma_j_sq)[topo.cluster_of]
    theta = centers[topo.cluster_of] + sj[:, None] * gt.standard_normal((spec.n, spec.d))
    Xs, ys = [], []
    for i in range(spec.n):
        X = _design(spec, int(spec.m[i]), gx)
        ys.append(X @ theta[i] + np.sqrt(spec.sigma_i_sq[i]) * ge.standard_normal(X.shape[0]))
        Xs.append(X)
    return HlmSample(spec=spec, topo=topo, centers=centers, theta=theta, X=Xs, y=ys)


def blue_penalty(spec: HlmSpec) -> PenaltyConfig:
    """``lam_j = 1/s_bar^2``, ``gamma_i = 1/s_j^2`` (needs positive variances)."""
    if not spec.sigma_bar_sq > 0 or np.any(spec.sigma_j_sq <= 0):
        raise ConfigError("the variance-matched penalty needs positive prior variances")
    topo = spec.topology()
    gamma = (1.0 / spec.sigma_j_sq)[topo.cluster_of]
    return PenaltyConfig.from_lambda(topo, np.full(spec.k, 1.0 / spec.sigma_bar_sq), gamma)


# --------------------------------------------------------------------------
# the penalized estimator


def _solve_spd(M, rhs, what):
    try:
        return scipy.linalg.solve(M, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"{what} is singular") from exc


def _closed_form(A, b, topo: NetworkTopology, pen: PenaltyConfig):
    """Exact minimizer by eliminating ``theta``, then ``w``, then ``wbar``.

    ``A[i]``, ``b[i]`` are the Hessian and linear term of client ``i``'s
    loss. Returns ``(theta, w, wbar)``.
    """
    if pen.lam is None:
        raise ConfigError("the estimator needs per-cluster lambda")
    n, d = b.shape
    eye = np.eye(d)
    g, lam = pen.gamma, pen.lam
    Minv = _batched_inverse(A + g[:, None, None] * eye, "client system")
    Minv_b = np.einsum("ijk,ik->ij", Minv, b)
    Qinv = np.empty((topo.k, d, d))
    r = np.empty((topo.k, d))
    for j, mem in enumerate(topo.members):
        idx = list(mem)
        Q = lam[j] * eye + np.einsum("i,ijk->jk", g[idx], eye - g[idx, None, None] * Minv[idx])
        Qinv[j] = _solve_spd(Q, eye, f"cluster {j + 1} system")
        r[j] = g[idx] @ Minv_b[idx]
    if lam.sum() > 0:
        top = np.einsum("j,jkl->kl", lam, eye - lam[:, None, None] * Qinv)
        rhs = np.einsum("j,jk->k", lam, np.einsum("jkl,jl->jk", Qinv, r))
        wbar = _solve_spd(top, rhs, "network system")
    else:
        wbar = None
    w = np.einsum("jkl,jl->jk", Qinv, r + (lam[:, None] * wbar if wbar is not None else 0.0))
    if wbar is None:
        wbar = w.mean(axis=0)  # undetermined; any value leaves the objective unchanged
    theta = np.einsum("ijk,ij->ik", Minv, b + g[:, None] * w[topo.cluster_of])
    return theta, w, wbar


def solve_hlm_closed_form(sample: HlmSample, pen: PenaltyConfig | None = None, noise_var=None) -> EstimatorResult:
    """Minimizer of the penalized likelihood (``our``).

    ``pen`` defaults to the variance-matched penalty of the sample's spec.
    """
    pen = blue_penalty(sample.spec) if pen is None else pen
    pen.validate_for(sample.topo)
    losses = sample.losses(noise_var)
    theta, w, wbar = _closed_form(losses.A, losses.b, sample.topo, pen)
    return _result("our", theta, sample, w=w, wbar=wbar)


def hlm_first_order_residual(theta, w, wbar, sample: HlmSample, pen: PenaltyConfig, noise_var=None) -> float:
    """Norm of the gradient of the penalized likelihood over ``(theta, w, wbar)``."""
    losses = sample.losses(noise_var)
    c = sample.topo.cluster_of
    g, lam = pen.gamma[:, None], pen.lam[:, None]
    gt = losses.grad(theta) + g * (theta - w[c])
    gw = np.zeros_like(w)
    np.add.at(gw, c, g * (w[c] - theta))
    gw += lam * (w - wbar)
    gb = -np.sum(lam * (w - wbar), axis=0)
    return float(np.sqrt(np.sum(gt ** 2) + np.sum(gw ** 2) + np.sum(gb ** 2)))


# --------------------------------------------------------------------------
# baselines


def _pinv_solve(G, h):
    return np.linalg.pinv(G, rcond=PINV_RCOND, hermitian=True) @ h


def estimate_local(sample: HlmSample) -> EstimatorResult:
    """Per-client (pseudo-inverse) least squares (``lt``)."""
    est = np.stack([_pinv_solve(X.T @ X, X.T @ y) for X, y in zip(sample.X, sample.y)])
    return _result("lt", est, sample)


def estimate_single_model(sample: HlmSample) -> EstimatorResult:
    """One pooled least-squares fit shared by every client (``sm``)."""
    G = sum(X.T @ X for X in sample.X)
    h = sum(X.T @ y for X, y in zip(sample.X, sample.y))
    theta = _pinv_solve(G, h)
    return _result("sm", np.tile(theta, (sample.topo.n, 1)), sample)


def _batched_inverse(M, what):
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"{what} is singular") from exc
    Linv = np.linalg.inv(L)
    return np.einsum("nji,njk->nik", Linv, Linv)


def single_cluster_fit(Xs, ys, lam: float, grams=None):
    """Minimizer of ``1/n sum_i (1/2 ||X_i theta_i - y_i||^2 + lam/2 ||theta_i - mean theta||^2)``.

    ``grams`` optionally supplies the stacked ``(X_i^T X_i, X_i^T y_i)``.
    """
    if not lam > 0:
        raise ConfigError("single-cluster penalty must be positive")
    G, h = _grams(Xs, ys) if grams is None else grams
    n, d = h.shape
    eye = np.eye(d)
    Minv = _batched_inverse(G + lam * eye, "single-cluster client system")
    lhs = eye - (lam / n) * Minv.sum(axis=0)
    rhs = np.einsum("nij,nj->i", Minv, h) / n
    if np.linalg.cond(lhs) > 1e14:
        raise SolverError("single-cluster center system is singular")
    tbar = np.linalg.solve(lhs, rhs)
    return np.einsum("nij,nj->ni", Minv, h + lam * tbar), tbar


def _grams(Xs, ys):
    return np.stack([X.T @ X for X in Xs]), np.stack([X.T @ y for X, y in zip(Xs, ys)])


SC_GRID = tuple(np.linspace(0.01, 2.0, 20))


def select_single_cluster_lambda(sample: HlmSample, grid=SC_GRID, holdout: float = 0.2, seed: int = 0,
                                 min_rows: int = 5, fallback: float = 1.0) -> float:
    """Hold out the last ``holdout`` share of each client's rows (after a seeded shuffle) and
    pick the grid value with the smallest held-out prediction error.

    When some client has fewer than ``min_rows`` rows, returns ``fallback``.
    """
    if min(X.shape[0] for X in sample.X) < min_rows:
        return float(fallback)
    g = _rng.stream(seed, "sc-cv")
    fit_X, fit_y, val_X, val_y = [], [], [], []
    for X, y in zip(sample.X, sample.y):
        perm = g.permutation(X.shape[0])
        n_val = max(1, int(round(holdout * X.shape[0])))
        v, f = perm[:n_val], perm[n_val:]
        fit_X.append(X[f]), fit_y.append(y[f]), val_X.append(X[v]), val_y.append(y[v])
    grams = _grams(fit_X, fit_y)
    best, best_err = None, np.inf
    for lam in grid:
        est, _ = single_cluster_fit(fit_X, fit_y, float(lam), grams=grams)
        err = sum(float(np.sum((Xv @ t - yv) ** 2)) for Xv, yv, t in zip(val_X, val_y, est))
        if err < best_err:
            best, best_err = float(lam), err
    return best


def estimate_single_cluster(sample: HlmSample, lambda_sc: float | None = None, cv_grid=None,
                            seed: int = 0) -> EstimatorResult:
    """Single-cluster personalized fit (``sc``), ignoring the cluster structure."""
    if lambda_sc is None:
        lambda_sc = select_single_cluster_lambda(sample, SC_GRID if cv_grid is None else cv_grid, seed=seed)
    est, tbar = single_cluster_fit(sample.X, sample.y, lambda_sc)
    return _result("sc", est, sample, lambda_sc=lambda_sc, center=tbar)


# --------------------------------------------------------------------------
# generalized least squares


def _offset_covariance(spec: HlmSpec, topo: NetworkTopology, target: int) -> np.ndarray:
    """Per-coordinate covariance of ``theta_l* - theta_target*`` over clients ``l``.

    Each offset is a signed sum of the latent draws (cluster shifts then
    client shifts); the covariance is ``A diag(v) A^T``.
    """
    k, n = topo.k, topo.n
    c = topo.cluster_of
    A = np.zeros((n, k + n))
    A[np.arange(n), c] += 1.0
    A[:, c[target]] -= 1.0
    A[np.arange(n), k + np.arange(n)] += 1.0
    A[:, k + target] -= 1.0
    v = np.concatenate([np.full(k, spec.sigma_bar_sq), spec.sigma_j_sq[c]])
    return (A * v) @ A.T


def _gls(Z, y, S):
    try:
        cho = scipy.linalg.cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SolverError("noise covariance is not positive definite") from exc
    SiZ = scipy.linalg.cho_solve(cho, Z)
    Siy = scipy.linalg.cho_solve(cho, y)
    return _solve_spd(Z.T @ SiZ, Z.T @ Siy, "GLS normal matrix")


def estimate_gls(sample: HlmSample, spec: HlmSpec | None = None, target: int = 0,
                 variant: str = "raw") -> EstimatorResult:
    """GLS estimate of ``theta_target*`` treating the other clients' offsets as noise.

    ``variant="raw"`` regresses on every client's raw data; ``"local"``
    uses the target's raw data plus the other clients' local least-squares
    estimates (which needs ``m_l >= d`` and invertible designs).
    """
    spec = sample.spec if spec is None else spec
    topo = sample.topo
    if not 0 <= target < topo.n:
        raise ConfigError("target client out of range")
    d = spec.d
    C = _offset_covariance(spec, topo, target)
    s2 = spec.sigma_i_sq
    if variant == "raw":
        Z = np.vstack(sample.X)
        y = np.concatenate(sample.y)
        starts = np.cumsum([0] + [X.shape[0] for X in sample.X])
        S = np.zeros((Z.shape[0], Z.shape[0]))
        for a, Xa in enumerate(sample.X):
            sa = slice(starts[a], starts[a + 1])
            for b in range(a, topo.n):
                if C[a, b] == 0 and a != b:
                    continue
                sb = slice(starts[b], starts[b + 1])
                blk = C[a, b] * (Xa @ sample.X[b].T)
                S[sa, sb] = blk
                S[sb, sa] = blk.T
            S[sa, sa] += s2[a] * np.eye(Xa.shape[0])
    elif variant == "local":
        others = [i for i in range(topo.n) if i != target]
        Xt, yt = sample.X[target], sample.y[target]
        nt = Xt.shape[0]
        Z = np.vstack([Xt] + [np.eye(d)] * len(others))
        parts = [yt]
        covs = []
        for i in others:
            G = sample.X[i].T @ sample.X[i]
            Ginv = _solve_spd(G, np.eye(d), f"client {i + 1} design")
            parts.append(Ginv @ (sample.X[i].T @ sample.y[i]))
            covs.append(s2[i] * Ginv)
        y = np.concatenate(parts)
        N = Z.shape[0]
        S = np.zeros((N, N))
        S[:nt, :nt] = s2[target] * np.eye(nt)
        Co = C[np.ix_(others, others)]
        S[nt:, nt:] = np.kron(Co, np.eye(d)) + scipy.linalg.block_diag(*covs)
    else:
        raise ConfigError(f"unknown GLS variant {variant!r}")
    est = _gls(Z, y, S)
    return _result("gls", est, sample, clients=[target], variant=variant)


# --------------------------------------------------------------------------
# single cluster, identity design


def _leave_one_out_means(ys):
    ys = np.asarray(ys, dtype=float)
    n = ys.shape[0]
    if n < 2:
        raise ConfigError("the blend needs at least two clients")
    return (ys.sum(axis=0)[None, :] - ys) / (n - 1)


def blue_blend_single_cluster(ys) -> np.ndarray:
    """Best linear unbiased estimate of every ``theta_i*`` from ``y_i ~ N(theta_i*, I)``,
    ``theta_i* ~ N(tbar*, I)`` with ``tbar*`` unknown.

    ``(n+1)/(2n) y_i + (n-1)/(2n) mean_{l != i} y_l``.
    """
    ys = np.asarray(ys, dtype=float)
    rest = _leave_one_out_means(ys)
    n = ys.shape[0]
    return (n + 1) / (2 * n) * ys + (n - 1) / (2 * n) * rest


SHRINK_MODES = ("positive-part", "plain")


def james_stein_single_cluster(ys, shrink_mode: str = "positive-part") -> np.ndarray:
    """The blend with the leave-one-out mean shrunk toward zero.

    The factor is ``1 - (d - 2) s^2 / ||mean_{l != i} y_l||^2`` with
    ``s^2 = 2/(n-1)``, the per-coordinate variance of that mean around
    ``tbar*``; ``positive-part`` clips it at zero.
    """
    ys = np.asarray(ys, dtype=float)
    n, d = ys.shape
    if d <= 3:
        raise ConfigError("shrinkage only dominates for d > 3")
    if shrink_mode not in SHRINK_MODES:
        raise ConfigError(f"unknown shrink mode {shrink_mode!r}")
    rest = _leave_one_out_means(ys)
    s2 = 2.0 / (n - 1)
    norm2 = np.sum(rest ** 2, axis=1)
    with np.errstate(divide="ignore"):
        C = 1.0 - (d - 2) * s2 / norm2
    C = np.where(norm2 > 0, C, 0.0 if shrink_mode == "positive-part" else -np.inf)
    if shrink_mode == "positive-part":
        C = np.maximum(C, 0.0)
    return (n + 1) / (2 * n) * ys + (n - 1) / (2 * n) * C[:, None] * rest


def _single_cluster_ys(sample: HlmSample):
    if sample.topo.k != 1 or sample.spec.design != "identity":
        raise ConfigError("needs a single cluster with identity designs")
    return np.stack(sample.y)


def estimate_james_stein(sample: HlmSample, shrink_mode: str = "positive-part") -> EstimatorResult:
    return _result("js", james_stein_single_cluster(_single_cluster_ys(sample), shrink_mode), sample)


def estimate_blue_blend(sample: HlmSample) -> EstimatorResult:
    return _result("blue", blue_blend_single_cluster(_single_cluster_ys(sample)), sample)


ESTIMATORS = ("our", "lt", "sm", "sc", "gls")
