"""Multi-cluster personalized federated learning: objective, optimizers and estimators."""

from .errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    FedClusterError,
    ScheduleError,
    SolverError,
    StaleAnchorError,
    TopologyError,
    UndefinedAverageError,
)
from .network import (
    ClientDataset,
    LogisticLoss,
    LossBatch,
    NetworkTopology,
    PenaltyConfig,
    QuadraticLoss,
    alpha_from_lambda,
    cluster_average,
    global_average,
    lambda_from_alpha,
    logistic_loss_oracle,
    quadratic_loss_oracle,
)
from .objective import (
    ObjectiveValue,
    SmoothnessProfile,
    eval_mtl_objective,
    eval_objective,
    grad_objective,
    reference_minimizer,
    smoothness_profile,
)
from .l2gd import (
    CommLog,
    SchedulerConfig,
    TrajectoryRecord,
    expected_smoothness,
    gradient_oracle,
    optimal_tau,
    residual_variance,
    run_async_l2gd,
    tune_schedule,
)
from .al2sgd import (
    KatyushaParams,
    KatyushaState,
    run_async_al2sgd_plus,
    tune_al2sgd_schedule,
    tune_katyusha,
    vr_gradient_estimate,
)
from .hlm import (
    EstimatorResult,
    HlmSample,
    HlmSpec,
    blue_blend_single_cluster,
    estimate_gls,
    estimate_james_stein,
    estimate_local,
    estimate_single_cluster,
    estimate_single_model,
    generate_hlm,
    solve_hlm_closed_form,
)

__version__ = "0.1.0"
