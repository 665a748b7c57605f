"""Estimation error of the four estimators at m = 10 and m = 100."""

from dataclasses import replace

from _common import run


def _quick(cfg):
    return replace(cfg, replications=1, solver=replace(cfg.solver, kind="closed-form"))


if __name__ == "__main__":
    run("sim_table.yaml", __doc__, _quick)
