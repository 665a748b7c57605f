"""Suboptimality traces of Async-L2GD and of the accelerated variant.

Takes the same flags as the other scripts except ``--config``; the two runs
land in ``<out>/l2gd`` and ``<out>/al2sgd``.
"""

from _common import run

if __name__ == "__main__":
    run("optimize_l2gd.yaml", __doc__, {"replications": 1, "T": 200}, subdir="l2gd")
    run("optimize_al2sgd.yaml", __doc__, {"replications": 1, "T": 500}, subdir="al2sgd")
