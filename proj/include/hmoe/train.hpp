#pragma once

#include "hmoe/aux_losses.hpp"
#include "hmoe/model.hpp"
#include "hmoe/optim.hpp"
#include "hmoe/telemetry.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace hmoe {

enum class LrSchedule
{
    kConstant, // linear warmup, then flat
    kCosine,   // linear warmup, then cosine decay to min_lr_ratio * lr at `steps`
};

std::string to_string(LrSchedule s);
LrSchedule parse_lr_schedule(const std::string& text);

struct TrainConfig
{
    std::int64_t steps = 200;
    std::size_t batch_size = 8;
    double lr = 1e-3;
    std::int64_t warmup_steps = 100;
    LrSchedule schedule = LrSchedule::kConstant;
    double min_lr_ratio = 0.1;
    AdamWOptions adam;
    std::int64_t log_interval = 1;
    // lm_loss above this (or non-finite) aborts with DivergenceError.
    double divergence_threshold = 100.0;
    bool collect_histograms = true;

    void validate() const;
};

// Learning rate used at 0-based step `step`.
double learning_rate(const TrainConfig& cfg, std::int64_t step);

struct Batch
{
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::int32_t> inputs;  // [batch x seq]
    std::vector<std::int32_t> targets; // inputs shifted by one
};

// Random windows; depends only on (corpus, seed, step), so resumed runs see
// the same batches.
Batch sample_batch(std::span<const std::int32_t> corpus, std::size_t batch, std::size_t seq, std::uint64_t seed,
                   std::int64_t step);

struct Objective
{
    ForwardResult forward;
    Tensor lm_loss;
    AuxLossReport aux; // terms averaged over layers
};

// Forward pass plus every auxiliary term; aux.combined holds the objective.
Objective compute_objective(const Model& model, const Batch& batch);

struct StepReport
{
    double lm_loss = 0.0;
    AuxLossReport aux;
    TelemetryRecord telemetry;
};

/// One forward, combined-objective backward and AdamW update.
/// `cum_flops` is advanced by this step's training FLOPs.
StepReport train_step(Model& model, const Batch& batch, AdamW& optimizer, const TrainConfig& cfg,
                      std::int64_t step, double& cum_flops);

struct Checkpoint;

/// Owns a model, its optimizer and the corpus; drives train_step.
class Trainer
{
public:
    Trainer(ModelConfig model_cfg, TrainConfig train_cfg, std::vector<std::int32_t> corpus);
    Trainer(const Checkpoint& ckpt, std::vector<std::int32_t> corpus);

    // Runs until `until_step` total steps have been taken. Records whose step
    // index is a multiple of log_interval go to `sink`.
    void run(std::int64_t until_step, const TelemetrySink& sink);

    Checkpoint checkpoint() const;

    const Model& model() const noexcept { return model_; }
    Model& model() noexcept { return model_; }
    std::int64_t step() const noexcept { return step_; }
    double cum_flops() const noexcept { return cum_flops_; }
    const TrainConfig& train_config() const noexcept { return train_cfg_; }

private:
    ModelConfig model_cfg_;
    TrainConfig train_cfg_;
    std::vector<std::int32_t> corpus_;
    Model model_;
    AdamW optimizer_;
    std::int64_t step_ = 0;
    double cum_flops_ = 0.0;
};

// Runs `steps` total steps from scratch (or on top of `resume`) over the
// corpus file and returns the final checkpoint.
Checkpoint train_loop(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                      const std::filesystem::path& corpus_path, std::int64_t steps, const TelemetrySink& sink,
                      const Checkpoint* resume = nullptr);

// exp(mean NLL) over non-overlapping context windows.
double evaluate_perplexity(const Model& model, std::span<const std::int32_t> tokens);
double evaluate_perplexity(const Model& model, const std::filesystem::path& corpus_path);

struct InferenceTrace
{
    std::vector<TokenActivation> tokens;
    std::vector<std::vector<Histogram>> histograms; // per layer per expert
    double mean_nll = 0.0;
};

// Inference over non-overlapping windows (at most `max_windows`, 0 = all),
// recording every token's routing and NLL.
InferenceTrace trace_corpus(const Model& model, std::span<const std::int32_t> tokens, std::size_t max_windows = 0);

} // namespace hmoe
