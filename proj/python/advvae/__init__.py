"""MultVAE and adversarial MultVAE with gradient reversal, attacker probes and evaluation metrics."""

from ._core import (
    UNKNOWN_LABEL,
    AttackerConfig,
    ConfigError,
    DataError,
    DivergenceError,
    Error,
    InteractionMatrix,
    ModelConfig,
    ModelParameters,
    PreprocessOptions,
    SelectionRule,
    TrainConfig,
    accuracy,
    attack,
    balanced_accuracy,
    evaluate_ranking,
    generate_synthetic,
    load_dataset_cache,
    load_matrix,
    make_folds,
    matrix_from_text,
    mcnemar,
    ndcg_at_k,
    recall_at_k,
    run_cli,
    train,
    wilcoxon,
)

__all__ = [name for name in dir() if not name.startswith("_")]
