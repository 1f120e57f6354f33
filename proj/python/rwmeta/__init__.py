"""Reweighted meta-learning toolkit: MAML and RW-MAML at desk scale."""

from ._core import (
    AlignmentError,
    ConfigError,
    DivergenceError,
    Model,
    NonFiniteValue,
    ShapeError,
    TaskData,
    TaskPool,
    UnsupportedConfig,
    UnsupportedTask,
    WeightLookupError,
    build_pool,
    gradcheck,
    init_params,
    inner_adapt,
    instance_losses,
    load_pool,
    model_gradient,
    model_hvp,
    model_loss,
    parse_config,
    run_experiment,
    sample_classification_task,
    sample_linear_ood_task,
    sample_sine_task,
    train_maml,
    train_rwmaml,
)

__all__ = [
    "AlignmentError",
    "ConfigError",
    "DivergenceError",
    "Model",
    "NonFiniteValue",
    "ShapeError",
    "TaskData",
    "TaskPool",
    "UnsupportedConfig",
    "UnsupportedTask",
    "WeightLookupError",
    "build_pool",
    "gradcheck",
    "init_params",
    "inner_adapt",
    "instance_losses",
    "load_pool",
    "model_gradient",
    "model_hvp",
    "model_loss",
    "parse_config",
    "run_experiment",
    "sample_classification_task",
    "sample_linear_ood_task",
    "sample_sine_task",
    "train_maml",
    "train_rwmaml",
]
