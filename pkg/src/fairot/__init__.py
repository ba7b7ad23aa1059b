"""Fair optimal transport: exact-constraint and penalized entropic
solvers, learned ground costs, and the experiment harness around them."""

__version__ = "0.1.0"

from .costlearn import (
    BilevelConfig,
    MahalanobisModel,
    MlpModel,
    TrainingHistory,
    bilevel_objective,
    load_model,
    mahalanobis_cost,
    match_with_learned_cost,
    mlp_cost,
    pretrain_mlp,
    psd_project,
    save_model,
    train_cost,
)
from .domain import (
    CostMatrix,
    GroupPair,
    LabeledDataset,
    TransportPlan,
    entropy_term,
    group_coupling,
    squared_euclidean_cost,
    transport_cost,
    uniform_plan,
)
from .fairness import (
    FairnessTarget,
    InfeasibleTargetError,
    TargetValidation,
    fairness_loss,
    fairness_loss_grad,
    product_fair_plan,
    target_from_quota,
    validate_target,
)
from .harness import (
    AGREEMENT_TOL,
    DEFAULT_TARGET,
    METHODS,
    ConfigError,
    ReusabilitySpec,
    SweepSpec,
    TradeoffRecord,
    agreement_suite,
    emit_plot_data,
    read_records,
    records_digest,
    run_reusability,
    run_sweep,
)
from .oracle import (
    OracleConfig,
    OracleResult,
    dual_ascent_entropic,
    dual_ascent_fair,
    finite_diff,
)
from .penalized import GcgConfig, GcgIterate, armijo_step, penalized_gcg, penalized_objective
from .sinkhorn import (
    DualPotentials,
    SinkhornConfig,
    SolverReport,
    fair_sinkhorn,
    load_plan,
    sample_matching,
    save_plan,
    sinkhorn,
)
from .synthdata import GenSpec, gen_circles, gen_gaussians, generate, resample

__all__ = [
    "AGREEMENT_TOL",
    "BilevelConfig",
    "ConfigError",
    "CostMatrix",
    "DEFAULT_TARGET",
    "DualPotentials",
    "FairnessTarget",
    "GcgConfig",
    "GcgIterate",
    "GenSpec",
    "GroupPair",
    "InfeasibleTargetError",
    "LabeledDataset",
    "METHODS",
    "MahalanobisModel",
    "MlpModel",
    "OracleConfig",
    "OracleResult",
    "ReusabilitySpec",
    "SinkhornConfig",
    "SolverReport",
    "SweepSpec",
    "TargetValidation",
    "TradeoffRecord",
    "TrainingHistory",
    "TransportPlan",
    "agreement_suite",
    "armijo_step",
    "bilevel_objective",
    "dual_ascent_entropic",
    "dual_ascent_fair",
    "emit_plot_data",
    "entropy_term",
    "fair_sinkhorn",
    "fairness_loss",
    "fairness_loss_grad",
    "finite_diff",
    "gen_circles",
    "gen_gaussians",
    "generate",
    "group_coupling",
    "load_model",
    "load_plan",
    "mahalanobis_cost",
    "match_with_learned_cost",
    "mlp_cost",
    "penalized_gcg",
    "penalized_objective",
    "pretrain_mlp",
    "product_fair_plan",
    "psd_project",
    "read_records",
    "records_digest",
    "resample",
    "run_reusability",
    "run_sweep",
    "sample_matching",
    "save_model",
    "save_plan",
    "sinkhorn",
    "squared_euclidean_cost",
    "target_from_quota",
    "train_cost",
    "transport_cost",
    "uniform_plan",
    "validate_target",
]
