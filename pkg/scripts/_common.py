"""Shared argument handling for the experiment scripts."""

import argparse
from dataclasses import replace
from pathlib import Path

from fedcluster.harness.config import load_config
from fedcluster.harness.experiments import run_experiment

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(config_name: str, description: str, quick=None, subdir: str | None = None, argv=None):
    """Load ``configs/<config_name>``, apply command-line overrides and run it.

    ``subdir`` is appended to ``--out`` so several runs can share one directory.
    """
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("--config", type=Path, default=CONFIGS / config_name)
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--quick", action="store_true", help="shrink the run for a smoke test")
    args = parser.parse_args(argv)

    cfg = load_config(args.config)
    if args.out is not None:
        cfg = replace(cfg, output=str(Path(args.out) / subdir) if subdir else args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.quick and quick:
        cfg = quick(cfg) if callable(quick) else replace(cfg, **quick)
    res = run_experiment(cfg)
    print(res.summary.rstrip("\n"))
    for f in res.files:
        print(f"wrote {f}")
    return res
