#pragma once

#include "hmoe/aux_losses.hpp"
#include "hmoe/expert.hpp"
#include "hmoe/routing.hpp"
#include "hmoe/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace hmoe {

enum class SizeStrategy
{
    kGeometric,  // 1, 2, 4, ...
    kArithmetic, // 9, 11, 13, ...
    kHybrid,     // 1,1,1,1,2,2,4,4 pattern
    kHomogeneous,
    kCustom,     // explicit relative sizes
};

std::string to_string(SizeStrategy strategy);
SizeStrategy parse_size_strategy(const std::string& text);

struct HeterogeneityProfile
{
    SizeStrategy strategy = SizeStrategy::kHomogeneous;
    std::vector<std::size_t> relative_sizes;
    std::vector<std::size_t> h_ffn;
    std::size_t budget = 0;

    std::size_t experts() const noexcept { return h_ffn.size(); }
};

// Relative size vector a strategy produces for N experts. For kCustom the
// caller's `custom` sizes are validated and returned.
std::vector<std::size_t> relative_sizes(SizeStrategy strategy, std::size_t experts,
                                        const std::vector<std::size_t>& custom = {});

/// Splits `budget` hidden units across experts in proportion to the
/// strategy's relative sizes. Each share is rounded to nearest; the rounding
/// residual goes to the largest expert (highest index on ties).
HeterogeneityProfile allocate_sizes(SizeStrategy strategy, std::int64_t experts, std::int64_t budget,
                                    const std::vector<std::size_t>& custom = {});

struct HMoELayer
{
    Router router;
    std::vector<Expert> experts;
    HeterogeneityProfile profile;

    std::vector<Tensor> parameters() const;
};

HMoELayer new_hmoe_layer(std::size_t h_input, const HeterogeneityProfile& profile, std::uint64_t seed);

struct MoeResult
{
    Tensor output;
    RoutingDecision decision;
    // Token rows each expert actually evaluated.
    std::vector<std::size_t> expert_evaluations;
};

// Sparse dispatch: each expert runs only on the tokens routed to it, and the
// combine step sums gate-weighted outputs in ascending expert order.
MoeResult moe_forward(const HMoELayer& layer, const Tensor& x, RoutingMode mode, double k_or_p);

// Same combine, but with a caller-supplied decision (probabilities already routed).
MoeResult moe_forward(const HMoELayer& layer, const Tensor& x, RoutingDecision decision);

AssignmentStats layer_stats(const RoutingDecision& decision, const HeterogeneityProfile& profile);

} // namespace hmoe
