"""Command-line entry point: ``fedcluster {simulate,optimize,tune,report}``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
import warnings
from pathlib import Path

from ..al2sgd import tune_al2sgd_schedule, tune_katyusha
from ..errors import FedClusterError
from ..l2gd import tune_schedule
from ..objective import SmoothnessProfile
from .config import config_from_dict, default_config, load_config
from .experiments import run_experiment
from .report import report_files

SIMULATE_KINDS = ("sim-table", "sim-curve", "hlm-estimators", "logistic-synthetic")
OPTIMIZE_KINDS = ("optimize-l2gd", "optimize-al2sgd")


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from exc


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedcluster", description="Multi-cluster personalized federated learning simulator.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, kinds, default_kind):
        p.add_argument("--config", type=Path, help="YAML/JSON experiment config")
        p.add_argument("--kind", choices=kinds, default=None,
                       help=f"experiment kind when no config is given (default {default_kind})")
        p.add_argument("--seed", type=_seed)
        p.add_argument("--out", type=str, help="output directory")
        p.add_argument("--replications", type=int)
        p.add_argument("--method", type=str, help="comma-separated methods to run")
        p.add_argument("--m-grid", type=_int_list, help="comma-separated samples per client")
        p.set_defaults(kinds=kinds, default_kind=default_kind)

    common(sub.add_parser("simulate", help="run a simulation-study experiment"), SIMULATE_KINDS, "sim-table")
    common(sub.add_parser("optimize", help="run an optimizer experiment"), OPTIMIZE_KINDS, "optimize-l2gd")

    t = sub.add_parser("tune", help="print tuned schedule parameters for a smoothness profile")
    t.add_argument("--c1", type=float, required=True, help="max alpha_j gamma_i")
    t.add_argument("--c2", type=float, required=True, help="max (1 - alpha_j) gamma_i")
    t.add_argument("--L", type=float, required=True, help="loss smoothness")
    t.add_argument("--L-tilde", type=float, default=None, help="component smoothness (default: --L)")
    t.add_argument("--mu", type=float, default=1.0, help="strong convexity (default 1)")
    t.add_argument("--gamma-max", type=float, default=None, help="max gamma_i (default max(c1, c2))")
    t.add_argument("--rho", type=float, default=None, help="anchor-refresh probability; prints accelerated parameters")
    t.add_argument("--expected-smoothness", type=float, default=None,
                   help="expected-smoothness constant for the accelerated parameters (default: tuned bound)")

    r = sub.add_parser("report", help="aggregate harness CSVs into text tables")
    r.add_argument("paths", nargs="+", type=Path, help="CSV files or directories")
    r.add_argument("--out", type=Path, help="also write the report to this file")
    return ap


def _experiment_config(args):
    if args.config is not None:
        cfg = load_config(args.config)
        if cfg.kind not in args.kinds:
            raise FedClusterError(f"config kind {cfg.kind!r} belongs to the other subcommand")
        if args.kind is not None and args.kind != cfg.kind:
            raise FedClusterError(f"--kind {args.kind} conflicts with config kind {cfg.kind}")
    else:
        cfg = default_config(args.kind or args.default_kind)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output"] = args.out
    if args.replications is not None:
        overrides["replications"] = args.replications
    if args.method is not None:
        overrides["methods"] = [m.strip() for m in args.method.split(",") if m.strip()]
    if args.m_grid is not None:
        overrides["m_grid"] = args.m_grid
    if overrides:
        data = dataclasses.asdict(cfg)
        data.update(overrides)
        cfg = config_from_dict(data)
    return cfg


def _tune(args) -> str:
    prof = SmoothnessProfile(C1=args.c1, C2=args.c2, L_f=args.L, mu=args.mu, L_tilde=args.L_tilde,
                             gamma_max=args.gamma_max)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        plain = tune_schedule(prof)
        acc = tune_al2sgd_schedule(prof)
    lines = [f"note: {w.message}" for w in caught[:1]]
    lines.append(f"l2gd:   p0={plain.p0:.6g} p_j={plain.p:.6g} tau={plain.tau:.6g} eta={plain.eta:.6g} "
                 f"bound={plain.L_tilde:.6g}")
    lines.append(f"al2sgd: p0={acc.p0:.6g} p_j={acc.p:.6g} tau={acc.tau:.6g} bound={acc.L_tilde:.6g}")
    if args.rho is not None:
        L_es = acc.L_tilde if args.expected_smoothness is None else args.expected_smoothness
        kp = tune_katyusha(prof, L_es, args.rho)
        lines.append(f"katyusha: eta={kp.eta:.6g} a1={kp.a1:.6g} a2={kp.a2:.6g} b1={kp.b1:.6g} b2={kp.b2:.6g} "
                     f"rho={kp.rho:.6g}")
    return "\n".join(lines) + "\n"


def _expand(paths):
    out = []
    for p in paths:
        out.extend(sorted(p.rglob("*.csv")) if p.is_dir() else [p])
    if not out:
        raise FedClusterError("no CSV files found")
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command in ("simulate", "optimize"):
            res = run_experiment(_experiment_config(args))
            sys.stdout.write(res.summary if res.summary.endswith("\n") else res.summary + "\n")
            for f in res.files:
                sys.stdout.write(f"wrote {f}\n")
        elif args.command == "tune":
            sys.stdout.write(_tune(args))
        else:
            text = report_files(_expand(args.paths))
            sys.stdout.write(text)
            if args.out is not None:
                args.out.parent.mkdir(parents=True, exist_ok=True)
                args.out.write_text(text, encoding="utf-8")
    except (FedClusterError, ValueError, OSError, FloatingPointError, ArithmeticError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        sys.stderr.write(f"fedcluster: error: {msg}\n")
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
