import numpy as np


class FedClusterError(Exception):
    """Base class for all package errors."""


class TopologyError(FedClusterError, ValueError):
    pass


class ConfigError(FedClusterError, ValueError):
    pass


class UndefinedAverageError(FedClusterError, ValueError):
    pass


class ScheduleError(FedClusterError, ValueError):
    """A schedule asks for a branch (or a constant) its probabilities rule out."""


class DivergenceError(FedClusterError, FloatingPointError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class ConvergenceError(FedClusterError, RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message}; final gradient norm {grad_norm:.3e}")
        self.grad_norm = grad_norm


class SolverError(FedClusterError, np.linalg.LinAlgError):
    pass


class StaleAnchorError(FedClusterError, RuntimeError):
    """Cached anchor averages no longer match the anchors they summarize."""
