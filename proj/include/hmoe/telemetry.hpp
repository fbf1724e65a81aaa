#pragma once

#include "hmoe/layer.hpp"
#include "hmoe/model.hpp"
#include "hmoe/routing.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace hmoe {

inline constexpr int kTelemetryFormatVersion = 1;
inline constexpr double kTrainingFlopsMultiplier = 3.0; // forward + backward

struct ActivatedParams
{
    std::vector<double> per_token;
    double mean = 0.0;
};

// Per token: sum over activated experts of 3 * h_input * h_ffn_i. Router
// parameters are not included.
ActivatedParams activated_params(const RoutingDecision& decision, const HeterogeneityProfile& profile,
                                 std::size_t h_input);

// Matmul parameters every token passes through regardless of routing:
// attention projections, routers and the output projection.
std::size_t dense_matmul_params(const ModelConfig& cfg);

struct FlopsEstimate
{
    std::vector<double> per_token; // forward FLOPs
    double mean = 0.0;
    double training_total = 0.0; // kTrainingFlopsMultiplier * sum(per_token)
};

// Forward FLOPs per token = 2 * (activated expert params summed over layers)
// + 2 * dense_matmul_params. `decisions` holds one decision per layer.
FlopsEstimate flops_per_token(std::span<const RoutingDecision> decisions, const HeterogeneityProfile& profile,
                              const ModelConfig& cfg);

using Histogram = std::vector<std::uint64_t>;

struct LayerTelemetry
{
    std::vector<std::size_t> sizes;
    std::vector<std::uint64_t> activation_counts;
    std::vector<double> gate_sums;
    std::vector<std::uint64_t> evaluations;
    std::vector<double> activated_params; // per expert, mean contribution per token
    double mean_activated_params = 0.0;
    std::vector<Histogram> histograms; // per expert token-id counts (may be empty)

    double mean_gate(std::size_t e) const
    {
        return activation_counts[e] ? gate_sums[e] / static_cast<double>(activation_counts[e]) : 0.0;
    }
};

struct TelemetryRecord
{
    std::int64_t step = 0;
    std::size_t tokens = 0;
    double lm_loss = 0.0;
    double lb = 0.0;
    double p_penalty = 0.0;
    double entropy = 0.0;
    double combined = 0.0;
    double lr = 0.0;
    double step_flops = 0.0;
    double cum_flops = 0.0;
    double mean_activated_params = 0.0; // summed over layers
    std::vector<LayerTelemetry> layers;
};

// Builds one layer's telemetry. `token_ids` (input ids per routed row) may be
// empty to skip histograms.
LayerTelemetry layer_telemetry(const MoeResult& moe, const HeterogeneityProfile& profile, std::size_t h_input,
                               std::span<const std::int32_t> token_ids, std::size_t vocab);

using TelemetrySink = std::function<void(const TelemetryRecord&)>;

/// Square matrix with NaN marking "no data" entries.
struct Matrix
{
    std::size_t n = 0;
    std::vector<double> values;

    double operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
    double& operator()(std::size_t i, std::size_t j) { return values[i * n + j]; }
};

// W1 distance on the token-id line: L1 distance between empirical CDFs.
double wasserstein_1d(const Histogram& a, const Histogram& b);

// KL(a || b) after additive smoothing eps and renormalization.
double smoothed_kl(const Histogram& a, const Histogram& b, double eps = 1e-6);

Matrix expert_similarity_matrix(const std::vector<Histogram>& histograms);
Matrix expert_synergy_matrix(const std::vector<Histogram>& histograms, double eps = 1e-6);

/// Routing of one token through every layer, with its LM loss.
struct TokenActivation
{
    std::int32_t token = 0;
    double nll = 0.0;
    std::vector<std::vector<std::size_t>> experts; // per layer
};

struct TokenClass
{
    std::string name;
    std::function<bool(const TokenActivation&)> matches;
};

// Per expert: activations by matching tokens / total activations by matching tokens.
std::vector<double> token_activation_ratios(std::span<const TokenActivation> tokens, const TokenClass& cls,
                                            std::size_t layer, std::size_t experts);

struct ClassReport
{
    std::string name;
    std::size_t tokens = 0;
    std::vector<std::vector<double>> ratios;        // per layer per expert
    std::vector<double> activated_param_ratio;      // per layer, activated / total expert params
};

struct LayerAnalysis
{
    std::size_t layer = 0;
    std::vector<std::size_t> sizes;
    std::vector<std::uint64_t> expert_tokens;
    Matrix similarity;
    Matrix synergy;
};

struct AnalysisReport
{
    std::string source;
    std::vector<LayerAnalysis> layers;
    std::vector<ClassReport> classes;
};

// Matrices from per-layer per-expert histograms.
AnalysisReport analyze_histograms(const std::vector<std::vector<Histogram>>& histograms,
                                  const std::vector<std::vector<std::size_t>>& sizes, std::string source);

// Easy/hard classes from the bottom/top NLL quartiles (plus "all").
std::vector<ClassReport> difficulty_classes(std::span<const TokenActivation> tokens,
                                            const std::vector<std::vector<std::size_t>>& sizes,
                                            std::size_t h_input);

inline constexpr const char* kTelemetryCsvHeader =
    "step,layer,expert,size,activation_count,mean_gate,activated_params,cum_flops";

/// Writes <dir>/telemetry.csv and <dir>/telemetry.json. Byte-identical for
/// identical inputs.
void export_report(const std::vector<TelemetryRecord>& records, const std::vector<AnalysisReport>& reports,
                   const std::string& config_echo, const std::filesystem::path& dir);

// Shortest round-trip decimal form used in every exported number.
std::string format_double(double v);

} // namespace hmoe
