"""Test cross-entropy of clustered logistic regression against the baselines."""

from dataclasses import replace

from _common import run


def _quick(cfg):
    return replace(cfg, replications=1, solver=replace(cfg.solver, T=2000))


if __name__ == "__main__":
    run("logistic.yaml", __doc__, _quick)
