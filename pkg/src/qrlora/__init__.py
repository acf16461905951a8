"""Column-pivoted-QR dual low-rank adapters with diagnostics and a toy trainer."""

from .adapter import (
    DualAdapterLinear,
    InitStrategy,
    LoraAdapter,
    build_dual_layer,
    forward,
    init_baseline,
    init_main,
    init_sub,
    merge,
    trainable_parameter_count,
)
from .diagnostics import (
    CosineStructure,
    DiagnosticsReport,
    LayerDiagnostics,
    NormStats,
    build_report,
    column_norm_stats,
    cosine_structure,
    diagnose_layer,
    effective_rank,
    feature_delta_pca,
    grassmann_similarity,
    layer_diagnostics,
    rank_efficiency,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    DomainError,
    ManifestError,
    MatrixFileError,
)
from .linalg import (
    PcaResult,
    RrqrFactorization,
    SvdFactorization,
    as_matrix,
    greedy_pivot_oracle,
    inverse_permutation,
    pca_project,
    perm_matrix,
    rrqr,
    svd,
)
from .train import (
    AdamWState,
    ExperimentResult,
    FiniteDiffReport,
    ToyTask,
    TrainConfig,
    TrainReport,
    adamw_step,
    backward,
    finite_diff_check,
    gen_toy_task,
    mse_loss,
    poly_lr,
    pretrain_dense,
    run_experiment,
    run_experiment_detailed,
)

__all__ = [
    "AdamWState",
    "ConfigError",
    "ConvergenceError",
    "CosineStructure",
    "DiagnosticsReport",
    "DivergenceError",
    "DomainError",
    "DualAdapterLinear",
    "ExperimentResult",
    "FiniteDiffReport",
    "InitStrategy",
    "LayerDiagnostics",
    "LoraAdapter",
    "ManifestError",
    "MatrixFileError",
    "NormStats",
    "PcaResult",
    "RrqrFactorization",
    "SvdFactorization",
    "ToyTask",
    "TrainConfig",
    "TrainReport",
    "adamw_step",
    "as_matrix",
    "backward",
    "build_dual_layer",
    "build_report",
    "column_norm_stats",
    "cosine_structure",
    "diagnose_layer",
    "effective_rank",
    "feature_delta_pca",
    "finite_diff_check",
    "forward",
    "gen_toy_task",
    "grassmann_similarity",
    "greedy_pivot_oracle",
    "init_baseline",
    "init_main",
    "init_sub",
    "inverse_permutation",
    "layer_diagnostics",
    "merge",
    "mse_loss",
    "pca_project",
    "perm_matrix",
    "poly_lr",
    "pretrain_dense",
    "rank_efficiency",
    "rrqr",
    "run_experiment",
    "run_experiment_detailed",
    "svd",
    "trainable_parameter_count",
]
