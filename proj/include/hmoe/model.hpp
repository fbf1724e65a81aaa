#pragma once

#include "hmoe/aux_losses.hpp"
#include "hmoe/layer.hpp"
#include "hmoe/routing.hpp"
#include "hmoe/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hmoe {

enum class BalanceLoss
{
    kPPenalty,    // HMoE objective: P-Penalty (+ entropy under Top-P)
    kLoadBalance, // homogeneous MoE baseline objective
};

std::string to_string(BalanceLoss loss);
BalanceLoss parse_balance_loss(const std::string& text);

struct ModelConfig
{
    std::size_t n_layers = 2;
    std::size_t h_input = 128;
    std::size_t n_heads = 4;
    std::size_t head_dim = 32;
    std::size_t vocab_size = 256;
    std::size_t context_length = 128;

    std::size_t experts = 8;
    std::size_t budget_per_layer = 1024;
    SizeStrategy strategy = SizeStrategy::kArithmetic;
    std::vector<std::size_t> custom_sizes;

    RoutingMode routing = RoutingMode::kTopP;
    std::int64_t k = 2;
    double p = 0.6;

    BalanceLoss balance_loss = BalanceLoss::kPPenalty;
    AuxCoefficients coefficients;
    EntropySign entropy_sign = EntropySign::kPositive;

    std::uint64_t seed = 12345;

    // Throws ConfigError naming the violated invariant.
    void validate() const;

    double k_or_p() const { return routing == RoutingMode::kTopK ? static_cast<double>(k) : p; }
    ObjectiveMode objective_mode() const;
    HeterogeneityProfile profile() const;
};

enum class FfnKind
{
    kMoe,
    kDense, // one plain expert per block, no router; used for the dense-reduction check
};

struct NamedTensor
{
    std::string name;
    Tensor tensor;
};

struct Block
{
    Tensor attn_norm;
    Tensor wq, wk, wv, wo; // [h_input x h_input]
    Tensor ffn_norm;
    HMoELayer moe;
    std::optional<Expert> dense;
};

struct ForwardResult
{
    Tensor logits; // [batch*seq x vocab]
    std::vector<MoeResult> layers;
};

/// Decoder-only transformer: learned token and position embeddings, then
/// n_layers of [RMSNorm -> causal MHA -> residual -> RMSNorm -> HMoE ->
/// residual], a final RMSNorm and an untied output projection.
class Model
{
public:
    explicit Model(ModelConfig cfg, FfnKind ffn = FfnKind::kMoe);

    const ModelConfig& config() const noexcept { return cfg_; }
    FfnKind ffn_kind() const noexcept { return ffn_; }
    const std::vector<Block>& blocks() const noexcept { return blocks_; }
    const HeterogeneityProfile& profile() const noexcept { return profile_; }

    // tokens is row-major [batch x seq]; seq <= context_length.
    ForwardResult forward(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t seq) const;

    // Stable order; names are unique.
    std::vector<NamedTensor> named_parameters() const;
    std::size_t parameter_count() const;

    void zero_grad();

private:
    ModelConfig cfg_;
    FfnKind ffn_;
    HeterogeneityProfile profile_;
    Tensor tok_emb_; // [vocab x h]
    Tensor pos_emb_; // [context x h]
    std::vector<Block> blocks_;
    Tensor final_norm_;
    Tensor lm_head_; // [vocab x h]
};

// Closed form: V*h + C*h + L*(2h + 4h^2 + N*h + 3*h*budget) + h + V*h (MoE build).
std::size_t expected_parameter_count(const ModelConfig& cfg);

} // namespace hmoe
