#pragma once

#include "hmoe/model.hpp"
#include "hmoe/train.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hmoe {

inline constexpr char kCheckpointMagic[4] = {'H', 'M', 'O', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout (little-endian):
///   "HMOE" | u32 version | u64 config hash | u64 config length | config text
///   | u64 tensor count | per tensor: u32 name length, name, u32 rank,
///     u64 dims[rank], f64 values
/// Parameters are stored under their model names; optimizer moments under
/// "adam.m/<name>" and "adam.v/<name>"; counters under "state/...".
struct Checkpoint
{
    ModelConfig model_config;
    TrainConfig train_config;
    std::int64_t step = 0;
    double cum_flops = 0.0;
    std::vector<NamedTensor> parameters;
    std::int64_t optimizer_steps = 0;
    std::vector<std::vector<double>> adam_m;
    std::vector<std::vector<double>> adam_v;
};

std::uint64_t config_hash(const std::string& config_text);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

// FormatError on bad magic, unsupported version or hash mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies parameter values by name into `model`; every model parameter must be present.
void load_parameters(Model& model, const std::vector<NamedTensor>& params);

// Rebuilds a model from a checkpoint's config and parameters.
Model model_from_checkpoint(const Checkpoint& ckpt);

} // namespace hmoe
