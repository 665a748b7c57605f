"""Fitted estimator vs GLS, James-Stein and the baselines on a small network."""

from _common import run

if __name__ == "__main__":
    run("hlm_estimators.yaml", __doc__, {"replications": 50})
