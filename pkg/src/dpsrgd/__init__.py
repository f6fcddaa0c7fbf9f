"""Differentially private stochastic convex optimization with correlated
noise.

Layer map (each imports only from layers above it):

  geometry     projections and the L2 constraint ball
  objectives   convex per-example losses with exact population metrics
  counting     streaming binary tree + matrix-factorization noise shaping
  accounting   sensitivity/noise calibration and budget conversions
  optim        the optimizer runners (accelerated recursive-gradient,
               baselines, multi-epoch variants) and diagnostics
  harness      experiment specs, dataset IO, sweeps, CSV emission
  verify       the ten end-to-end acceptance criteria
  cli          the dpsrgd command-line entry point
"""

from .accounting import (
    PrivacyBudget,
    RegimeReport,
    batch_and_beta,
    build_regime_report,
    clip_norm,
    dim_check,
    gdp_to_dp,
    mu_for_dp,
    rho_for_dp,
    sensitivity_bound,
    srgd_sigma,
    zcdp_to_dp,
)
from .counting import (
    StrategyMatrix,
    TreeState,
    build_workload,
    calibrate_tree_sigma,
    covering_nodes,
    factorize,
    identity_strategy,
    load_strategy,
    mf_noise_stream,
    prefix_nodes,
    save_strategy,
    tree_baseline_objective,
    tree_error_bound,
    tree_ingest,
    tree_prefix,
)
from .geometry import ConstraintBall, project_ball
from .harness import (
    ExperimentSpec,
    MetricRow,
    MetricTable,
    emit_csv,
    load_dataset,
    parse_summary_csv,
    run_experiment,
    save_csv,
)
from .objectives import (
    GradientNoiseWrapper,
    LogisticTask,
    LossProblem,
    SyntheticQuadratic,
)
from .optim import (
    MemfConfig,
    RunAborted,
    RunRecord,
    SrgdConfig,
    linear_fit,
    potential,
    run_accelerated_dp_srgd,
    run_dp_ftrl,
    run_dp_memf,
    run_dp_sgd,
    run_dp_srg_memf,
    run_independent_variant,
    run_unaccelerated_srgd,
    variance_probe,
)
from .verify import CriterionResult, run_all

__version__ = "0.1.0"

__all__ = [
    "PrivacyBudget", "RegimeReport", "batch_and_beta", "build_regime_report",
    "clip_norm", "dim_check", "gdp_to_dp", "mu_for_dp", "rho_for_dp",
    "sensitivity_bound", "srgd_sigma", "zcdp_to_dp",
    "StrategyMatrix", "TreeState", "build_workload", "calibrate_tree_sigma",
    "covering_nodes", "factorize", "identity_strategy", "load_strategy",
    "mf_noise_stream", "prefix_nodes", "save_strategy",
    "tree_baseline_objective", "tree_error_bound", "tree_ingest",
    "tree_prefix",
    "ConstraintBall", "project_ball",
    "ExperimentSpec", "MetricRow", "MetricTable", "emit_csv", "load_dataset",
    "parse_summary_csv", "run_experiment", "save_csv",
    "GradientNoiseWrapper", "LogisticTask", "LossProblem",
    "SyntheticQuadratic",
    "MemfConfig", "RunAborted", "RunRecord", "SrgdConfig", "linear_fit",
    "potential", "run_accelerated_dp_srgd", "run_dp_ftrl", "run_dp_memf",
    "run_dp_sgd", "run_dp_srg_memf", "run_independent_variant",
    "run_unaccelerated_srgd", "variance_probe",
    "CriterionResult", "run_all",
    "__version__",
]
