"""Token world-model interpretability workbench.

Python bindings for the C++ core: synthetic game environments, the k-means
patch tokenizer, the small autoregressive world model with full tracing, and
the probing / intervention / attention / ablation statistics.
"""

from worldlens._core import (  # noqa: F401
    Codebook,
    GameState,
    Transformer,
    attention_entropy,
    cross_val_r2,
    decode,
    default_config,
    encode,
    fit_codebook,
    fit_ridge,
    gradient_check,
    ground_truth,
    kl_divergence,
    make_random_model,
    pearson,
    property_names,
    r2_score,
    render,
    reset,
    run_stage,
    spearman,
    step,
    token_change_rate,
)

__all__ = [
    "Codebook",
    "GameState",
    "Transformer",
    "attention_entropy",
    "cross_val_r2",
    "decode",
    "default_config",
    "encode",
    "fit_codebook",
    "fit_ridge",
    "gradient_check",
    "ground_truth",
    "kl_divergence",
    "make_random_model",
    "pearson",
    "property_names",
    "r2_score",
    "render",
    "reset",
    "run_stage",
    "spearman",
    "step",
    "token_change_rate",
]

__version__ = "0.1.0"
