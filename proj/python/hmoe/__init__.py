"""Heterogeneous mixture-of-experts language model toolkit."""

from ._hmoe import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    FormatError,
    HmoeError,
    IndexError,
    IoError,
    Model,
    allocate_sizes,
    aux_losses,
    detokenize,
    expert_similarity_matrix,
    expert_synergy_matrix,
    parse_config,
    select_top_k,
    select_top_p,
    smoothed_kl,
    summarize_telemetry,
    synthesize_corpus,
    tokenize,
    train,
    wasserstein_1d,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "HmoeError",
    "IndexError",
    "IoError",
    "Model",
    "allocate_sizes",
    "aux_losses",
    "detokenize",
    "expert_similarity_matrix",
    "expert_synergy_matrix",
    "parse_config",
    "select_top_k",
    "select_top_p",
    "smoothed_kl",
    "summarize_telemetry",
    "synthesize_corpus",
    "tokenize",
    "train",
    "wasserstein_1d",
]
