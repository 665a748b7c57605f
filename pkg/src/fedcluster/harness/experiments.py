"""Experiment runners. Each returns its rows and writes tidy CSV under ``cfg.output``."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import rng as _rng
from ..al2sgd import (
    iteration_budget,
    run_async_al2sgd_plus,
    tune_al2sgd_schedule,
    tune_katyusha,
    vr_expected_smoothness,
)
from ..errors import ConfigError
from ..hlm import (
    EstimatorResult,
    HlmSample,
    HlmSpec,
    blue_penalty,
    estimate_gls,
    estimate_local,
    estimate_single_cluster,
    estimate_single_model,
    generate_hlm,
    select_single_cluster_lambda,
    solve_hlm_closed_form,
)
from ..instances import random_quadratic_instance
from ..l2gd import (
    SchedulerConfig,
    expected_smoothness,
    optimal_taus,
    residual_variance,
    run_async_l2gd,
    simple_safe_step,
    tune_schedule,
)
from ..network import ClientDataset, LogisticLoss, LossBatch, NetworkTopology, PenaltyConfig
from ..objective import reference_minimizer, smoothness_profile
from .config import ExperimentConfig
from .report import (
    LOGISTIC_COLUMNS,
    OPTIMIZE_COLUMNS,
    SIM_COLUMNS,
    format_sim_report,
    write_csv,
)

THREADS_ENV = "FEDCLUSTER_THREADS"


def worker_count(n_tasks: int) -> int:
    env = os.environ.get(THREADS_ENV)
    if env is not None:
        try:
            cap = int(env)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
        if cap < 1:
            raise ConfigError(f"{THREADS_ENV} must be positive")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def parallel_map(fn, tasks: list) -> list:
    """``[fn(t) for t in tasks]``, in order, on up to ``worker_count`` processes."""
    workers = worker_count(len(tasks))
    if workers == 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


@dataclass
class ExperimentResult:
    kind: str
    rows: list
    files: list = field(default_factory=list)
    summary: str = ""
    info: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# hierarchical linear model experiments


def hlm_spec_for(cfg: ExperimentConfig, m: int) -> HlmSpec:
    h = cfg.hlm
    return HlmSpec(d=h.d, cluster_sizes=h.sizes(), sigma_bar_sq=h.sigma_bar_sq, sigma_j_sq=h.sigma_j_sq,
                   sigma_i_sq=h.sigma_i_sq, theta_star_bar=h.theta_star_bar, m=m, design=h.design)


def penalty_for(cfg: ExperimentConfig, spec: HlmSpec) -> PenaltyConfig:
    lam, gamma = cfg.penalty.lam, cfg.penalty.gamma
    if lam == "auto" or gamma == "auto":
        auto = blue_penalty(spec)
        lam = auto.lam if lam == "auto" else lam
        gamma = auto.gamma if gamma == "auto" else gamma
    return PenaltyConfig.from_lambda(spec.topology(), lam, gamma)


def fit_our(sample: HlmSample, pen: PenaltyConfig, solver, seed: int):
    """``our`` by exact solve, or by the single-coin optimizer from zero."""
    if solver.kind == "closed-form":
        return solve_hlm_closed_form(sample, pen)
    losses = sample.losses()
    eta = simple_safe_step(sample.topo, pen, losses, solver.p) if solver.eta == "auto" else float(solver.eta)
    sched = SchedulerConfig.simple(p=solver.p, eta=eta, T=solver.T, seed=seed, k=sample.topo.k)
    run = run_async_l2gd(sample.topo, pen, losses, sched, record_every=solver.T)
    err = np.sum((run.theta - sample.theta) ** 2, axis=1)
    return EstimatorResult(method="our", estimates=run.theta, sq_errors=err)


def _hlm_task(args):
    cfg, m, rep = args
    spec = hlm_spec_for(cfg, m)
    sample = generate_hlm(spec, _rng.derive_seed(cfg.seed, "hlm-sample", m, rep))
    rows = []
    for method in cfg.methods:
        if method == "our":
            res = fit_our(sample, penalty_for(cfg, spec), cfg.solver, _rng.derive_seed(cfg.seed, "solver", m, rep))
        elif method == "lt":
            res = estimate_local(sample)
        elif method == "sm":
            res = estimate_single_model(sample)
        elif method == "sc":
            sc = cfg.single_cluster
            if sc.lam is not None:
                res = estimate_single_cluster(sample, lambda_sc=sc.lam)
            else:
                grid = np.linspace(sc.grid_low, sc.grid_high, sc.grid_points)
                lam = select_single_cluster_lambda(sample, grid, holdout=sc.holdout,
                                                   seed=_rng.derive_seed(cfg.seed, "sc-cv", m, rep),
                                                   min_rows=sc.min_rows, fallback=sc.fallback)
                res = estimate_single_cluster(sample, lambda_sc=lam)
        elif method == "gls":
            res = estimate_gls(sample, target=cfg.target)
        else:  # pragma: no cover - rejected by the config
            raise ConfigError(f"unknown method {method!r}")
        rows.extend((method, m, rep, int(c), float(e)) for c, e in zip(res.clients, res.sq_errors))
    return rows


def run_hlm_grid(cfg: ExperimentConfig, filename: str) -> ExperimentResult:
    tasks = [(cfg, m, rep) for m in cfg.m_grid for rep in range(cfg.replications)]
    rows = [row for chunk in parallel_map(_hlm_task, tasks) for row in chunk]
    out = Path(cfg.output)
    csv_path = write_csv(out / filename, SIM_COLUMNS, rows)
    summary = format_sim_report(rows, cfg.methods, cfg.m_grid)
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    return ExperimentResult(kind=cfg.kind, rows=rows, files=[csv_path, out / "summary.txt"], summary=summary)


def run_sim_table(cfg: ExperimentConfig) -> ExperimentResult:
    return run_hlm_grid(cfg, "sim-table.csv")


def run_sim_curve(cfg: ExperimentConfig) -> ExperimentResult:
    return run_hlm_grid(cfg, "sim-curve.csv")


def run_hlm_estimators(cfg: ExperimentConfig) -> ExperimentResult:
    return run_hlm_grid(cfg, "hlm-estimators.csv")


# --------------------------------------------------------------------------
# optimizer experiments


def _schedule_from(cfg: ExperimentConfig, topo, profile, accelerated: bool):
    s = cfg.schedule
    tuned = tune_al2sgd_schedule(profile) if accelerated else tune_schedule(profile)
    p0 = tuned.p0 if s.p0 == "auto" else float(s.p0)
    p = np.full(topo.k, tuned.p) if s.p == "auto" else np.broadcast_to(np.asarray(s.p, float), (topo.k,)).copy()
    tau = optimal_taus(p0, p) if s.tau == "auto" else np.broadcast_to(np.asarray(s.tau, float), (topo.k,)).copy()
    eta = tuned.eta if s.eta == "auto" else float(s.eta)
    sched = SchedulerConfig(p0=p0, p=p, tau=tau, eta=eta, T=cfg.T, seed=0, mode=s.mode, safe_step=s.safe_step)
    return sched, tuned


def _optimize_task(args):
    cfg, rep = args
    accelerated = cfg.kind == "optimize-al2sgd"
    pr = cfg.problem
    inst = random_quadratic_instance(sizes=tuple(pr.sizes), d=pr.d, n_obs=pr.n_obs, seed=pr.seed,
                                     gamma=pr.gamma, alpha=pr.alpha, noise_var=pr.noise_var,
                                     condition=pr.condition)
    topo, pen, losses = inst.topo, inst.pen, inst.losses
    theta_hat = reference_minimizer(topo, pen, losses)
    profile = smoothness_profile(topo, pen, losses)
    sched, tuned = _schedule_from(cfg, topo, profile, accelerated)
    sched = replace(sched, seed=_rng.derive_seed(cfg.seed, "optimize", rep))
    info = {"p0": sched.p0, "p": sched.p.tolist(), "tau": sched.tau.tolist(), "eta": sched.eta,
            "tuned_bound": tuned.L_tilde}
    if accelerated:
        L_es = vr_expected_smoothness(topo, pen, losses, sched)
        kp = tune_katyusha(profile, L_es, cfg.schedule.rho)
        info.update(expected_smoothness=L_es, katyusha=kp.__dict__,
                    budget=iteration_budget(L_es, profile.mu, kp.rho, 1e-8))
        info["eta"] = kp.eta
        run = run_async_al2sgd_plus(topo, pen, losses, sched, kp, theta_hat=theta_hat,
                                    record_every=cfg.record_every, objective_every=cfg.record_every)
    else:
        if sched.mode == "async":
            info["expected_smoothness"] = expected_smoothness(topo, pen, losses, sched)
            info["residual_variance"] = residual_variance(theta_hat, topo, pen, losses, sched)
        run = run_async_l2gd(topo, pen, losses, sched, theta_hat=theta_hat,
                             record_every=cfg.record_every, objective_every=cfg.record_every)
    info["comm"] = run.comm.as_dict()
    tr = run.trajectory
    rows = [(t, d, o, b, json.dumps(w)) for t, d, o, b, w in
            zip(tr.iters, tr.dist_sq, tr.objective, tr.between_rounds, tr.within_rounds)]
    return rows, info


def run_optimizer_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    out = Path(cfg.output)
    results = parallel_map(_optimize_task, [(cfg, r) for r in range(cfg.replications)])
    files, all_rows, infos = [], [], []
    for rep, (rows, info) in enumerate(results):
        files.append(write_csv(out / f"trajectory_rep{rep}.csv", OPTIMIZE_COLUMNS, rows))
        all_rows.append(rows)
        infos.append(info)
    meta = out / "run.json"
    meta.write_text(json.dumps({"kind": cfg.kind, "replications": infos}, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    files.append(meta)
    first = infos[0]
    summary = (f"{cfg.kind}: p0={first['p0']:.6g} p={first['p']} tau={first['tau']} eta={first['eta']:.6g}; "
               f"final dist_sq (rep 0) = {all_rows[0][-1][1]:.6g}")
    return ExperimentResult(kind=cfg.kind, rows=all_rows, files=files, summary=summary, info={"runs": infos})


# --------------------------------------------------------------------------
# synthetic logistic experiment


CE_CLIP = 100.0


def cross_entropy(theta, X, y) -> float:
    """Mean test cross-entropy through the predicted probabilities, clipped at 100."""
    z = X @ theta
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -745, 745)))
        ce = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))
    if not np.isfinite(ce) or ce > CE_CLIP:
        return CE_CLIP
    return float(ce)


def _logistic_data(cfg: ExperimentConfig, rep: int):
    lg = cfg.logistic
    topo = NetworkTopology.from_sizes((lg.clients_per_cluster,) * lg.clusters)
    seed = _rng.derive_seed(cfg.seed, "logistic", rep)
    g = _rng.stream(seed, "logistic-params")
    gx = _rng.stream(seed, "logistic-design")
    gy = _rng.stream(seed, "logistic-labels")
    center = np.broadcast_to(np.asarray(lg.theta_star_bar, float), (lg.d,))
    centers = center + np.sqrt(lg.sigma_bar_sq) * g.standard_normal((topo.k, lg.d))
    theta = centers[topo.cluster_of] + np.sqrt(lg.sigma_j_sq) * g.standard_normal((topo.n, lg.d))
    train, test = [], []
    for i in range(topo.n):
        X = gx.standard_normal((lg.n_train + lg.n_test, lg.d))
        prob = 1.0 / (1.0 + np.exp(-(X @ theta[i])))
        y = (gy.random(X.shape[0]) < prob).astype(float)
        Xtr, ytr = X[: lg.n_train], y[: lg.n_train]
        if i < lg.degenerate_clients:
            ytr = np.ones_like(ytr)
        train.append((Xtr, ytr))
        test.append((X[lg.n_train:], y[lg.n_train:]))
    return topo, theta, train, test


def _fit_simple(topo, pen, losses, solver, seed):
    eta = simple_safe_step(topo, pen, losses, solver.p) if solver.eta == "auto" else float(solver.eta)
    sched = SchedulerConfig.simple(p=solver.p, eta=eta, T=solver.T, seed=seed, k=topo.k)
    return run_async_l2gd(topo, pen, losses, sched, record_every=solver.T).theta


def _logistic_task(args):
    cfg, rep = args
    lg = cfg.logistic
    topo, _, train, test = _logistic_data(cfg, rep)
    losses = LossBatch([LogisticLoss(ClientDataset(X, y), ridge=lg.ridge) for X, y in train])
    seed = _rng.derive_seed(cfg.seed, "logistic-solver", rep)
    rows = []
    for method in cfg.methods:
        if method == "our":
            pen = PenaltyConfig.from_lambda(topo, lg.lam, lg.gamma)
            est = _fit_simple(topo, pen, losses, cfg.solver, seed)
        elif method == "lt":
            pen = PenaltyConfig.uniform(topo, 0.0, 0.0)
            est = _fit_simple(topo, pen, losses, cfg.solver, seed)
        else:  # sm: one model on the pooled data
            one = NetworkTopology(((0,),))
            X = np.vstack([X for X, _ in train])
            y = np.concatenate([y for _, y in train])
            pooled = LossBatch([LogisticLoss(ClientDataset(X, y), ridge=lg.ridge)])
            est = np.tile(_fit_simple(one, PenaltyConfig.uniform(one, 0.0, 0.0), pooled, cfg.solver, seed),
                          (topo.n, 1))
        for i, (Xt, yt) in enumerate(test):
            acc = float(np.mean(((Xt @ est[i]) > 0) == (yt > 0.5)))
            rows.append((method, rep, i, cross_entropy(est[i], Xt, yt), acc))
    return rows


def run_logistic_synthetic(cfg: ExperimentConfig) -> ExperimentResult:
    rows = [r for chunk in parallel_map(_logistic_task, [(cfg, r) for r in range(cfg.replications)]) for r in chunk]
    out = Path(cfg.output)
    path = write_csv(out / "logistic.csv", LOGISTIC_COLUMNS, rows)
    lines = ["method  mean_ce  mean_acc"]
    for method in cfg.methods:
        ce = [r[3] for r in rows if r[0] == method]
        acc = [r[4] for r in rows if r[0] == method]
        lines.append(f"{method:<6}  {np.mean(ce):.4f}  {np.mean(acc):.4f}")
    summary = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    return ExperimentResult(kind=cfg.kind, rows=rows, files=[path, out / "summary.txt"], summary=summary)


RUNNERS = {
    "sim-table": run_sim_table,
    "sim-curve": run_sim_curve,
    "hlm-estimators": run_hlm_estimators,
    "optimize-l2gd": run_optimizer_experiment,
    "optimize-al2sgd": run_optimizer_experiment,
    "logistic-synthetic": run_logistic_synthetic,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    return RUNNERS[cfg.kind](cfg)
