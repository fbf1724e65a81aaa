#pragma once

#include "hmoe/model.hpp"
#include "hmoe/train.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace hmoe {

struct ExperimentConfig
{
    ModelConfig model;
    TrainConfig train;
    std::filesystem::path corpus;
    std::filesystem::path output_dir = "hmoe_out";
    bool histograms = true;
    // Windows of the training corpus traced after training for the analysis report (0 = skip).
    std::size_t analysis_windows = 32;

    void validate() const;
};

/// Parses the sectioned `key = value` format:
///
///   [model]       n_layers, h_input, n_heads, head_dim, vocab_size, context_length,
///                 experts, budget, strategy, custom_sizes, routing, k, p, seed
///   [loss]        balance, lambda_pp, lambda_ent, lambda_lb, entropy_sign
///   [train]       steps, batch_size, lr, warmup_steps, schedule, min_lr_ratio,
///                 beta1, beta2, adam_eps, weight_decay, log_interval,
///                 divergence_threshold
///   [experiment]  corpus, output_dir, histograms, analysis_windows
///
/// `#` starts a comment. Unknown sections or keys, malformed values and
/// invariant violations raise ConfigError prefixed with "line N:". Relative
/// corpus paths resolve against `base_dir`.
ExperimentConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig parse_config(const std::filesystem::path& path);

// Canonical text for the full experiment; re-parses to an equal config.
std::string emit_config(const ExperimentConfig& cfg);

// Canonical [model]/[loss]/[train] text stored in checkpoints.
std::string emit_model_train(const ModelConfig& model, const TrainConfig& train);

// Inverse of emit_model_train; rejects [experiment] keys.
void parse_model_train(const std::string& text, ModelConfig& model, TrainConfig& train);

bool operator==(const ModelConfig& a, const ModelConfig& b);
bool operator==(const TrainConfig& a, const TrainConfig& b);
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

} // namespace hmoe
