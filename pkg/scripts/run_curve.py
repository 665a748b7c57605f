"""Estimation error against the number of samples per client."""

from _common import run

if __name__ == "__main__":
    run("sim_curve.yaml", __doc__, {"replications": 3})
