#include "hmoe/layer.hpp"

#include "hmoe/error.hpp"
#include "hmoe/ops.hpp"
#include "hmoe/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hmoe {

std::string to_string(SizeStrategy strategy)
{
    switch (strategy) {
    case SizeStrategy::kGeometric:
        return "geometric";
    case SizeStrategy::kArithmetic:
        return "arithmetic";
    case SizeStrategy::kHybrid:
        return "hybrid";
    case SizeStrategy::kHomogeneous:
        return "homogeneous";
    case SizeStrategy::kCustom:
        return "custom";
    }
    return "unknown";
}

SizeStrategy parse_size_strategy(const std::string& text)
{
    for (auto s : {SizeStrategy::kGeometric, SizeStrategy::kArithmetic, SizeStrategy::kHybrid,
                   SizeStrategy::kHomogeneous, SizeStrategy::kCustom})
        if (to_string(s) == text)
            return s;
    throw ConfigError("unknown size strategy '" + text + "'");
}

std::vector<std::size_t> relative_sizes(SizeStrategy strategy, std::size_t experts,
                                        const std::vector<std::size_t>& custom)
{
    if (experts < 1)
        throw ConfigError("need at least one expert");
    std::vector<std::size_t> s(experts);
    switch (strategy) {
    case SizeStrategy::kGeometric:
        if (experts > 62)
            throw ConfigError("geometric strategy supports at most 62 experts");
        for (std::size_t i = 0; i < experts; ++i)
            s[i] = std::size_t{1} << i;
        break;
    case SizeStrategy::kArithmetic:
        for (std::size_t i = 0; i < experts; ++i)
            s[i] = 9 + 2 * i;
        break;
    case SizeStrategy::kHybrid:
        for (std::size_t i = 0; i < experts; ++i)
            s[i] = 2 * i < experts ? 1 : (4 * i < 3 * experts ? 2 : 4);
        break;
    case SizeStrategy::kHomogeneous:
        std::fill(s.begin(), s.end(), std::size_t{1});
        break;
    case SizeStrategy::kCustom:
        if (custom.size() != experts)
            throw ConfigError("custom strategy lists " + std::to_string(custom.size()) + " sizes for " +
                              std::to_string(experts) + " experts");
        for (std::size_t i = 0; i < experts; ++i) {
            if (custom[i] < 1)
                throw ConfigError("custom relative sizes must be positive");
            if (i > 0 && custom[i] < custom[i - 1])
                throw ConfigError("custom relative sizes must be non-decreasing by expert index");
        }
        s = custom;
        break;
    }
    return s;
}

HeterogeneityProfile allocate_sizes(SizeStrategy strategy, std::int64_t experts, std::int64_t budget,
                                    const std::vector<std::size_t>& custom)
{
    if (experts < 1)
        throw ConfigError("need at least one expert, got " + std::to_string(experts));
    if (budget < experts)
        throw ConfigError("budget " + std::to_string(budget) + " cannot give each of " + std::to_string(experts) +
                          " experts a hidden unit");
    const auto n = static_cast<std::size_t>(experts);
    HeterogeneityProfile profile;
    profile.strategy = strategy;
    profile.budget = static_cast<std::size_t>(budget);
    profile.relative_sizes = relative_sizes(strategy, n, custom);
    const auto total = std::accumulate(profile.relative_sizes.begin(), profile.relative_sizes.end(), std::size_t{0});

    std::size_t largest = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (profile.relative_sizes[i] >= profile.relative_sizes[largest])
            largest = i;

    auto distribute = [&](bool nearest) {
        profile.h_ffn.assign(n, 0);
        std::int64_t assigned = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double share = static_cast<double>(budget) * static_cast<double>(profile.relative_sizes[i]) /
                                 static_cast<double>(total);
            const auto h = static_cast<std::int64_t>(nearest ? std::llround(share) : std::floor(share));
            profile.h_ffn[i] = static_cast<std::size_t>(h);
            assigned += h;
        }
        const auto adjusted = static_cast<std::int64_t>(profile.h_ffn[largest]) + (budget - assigned);
        if (adjusted < 1)
            return false;
        profile.h_ffn[largest] = static_cast<std::size_t>(adjusted);
        return std::is_sorted(profile.h_ffn.begin(), profile.h_ffn.end());
    };
    // Nearest rounding can overshoot when shares sit near .5, pushing the
    // largest expert below its neighbour; flooring leaves a non-negative residual.
    if (!distribute(true))
        distribute(false);
    for (std::size_t i = 0; i < n; ++i)
        if (profile.h_ffn[i] < 1)
            throw ConfigError("budget " + std::to_string(budget) + " leaves expert " + std::to_string(i) +
                              " with no hidden units under the " + to_string(strategy) + " strategy");
    return profile;
}

std::vector<Tensor> HMoELayer::parameters() const
{
    std::vector<Tensor> params{router.weight};
    for (const auto& e : experts)
        for (auto& p : e.parameters())
            params.push_back(p);
    return params;
}

HMoELayer new_hmoe_layer(std::size_t h_input, const HeterogeneityProfile& profile, std::uint64_t seed)
{
    HMoELayer layer;
    layer.profile = profile;
    layer.router = new_router(profile.experts(), h_input, mix_seed(seed ^ fnv1a("router")));
    for (std::size_t i = 0; i < profile.experts(); ++i)
        layer.experts.push_back(new_expert(static_cast<std::int64_t>(h_input),
                                           static_cast<std::int64_t>(profile.h_ffn[i]),
                                           mix_seed(seed ^ fnv1a("expert." + std::to_string(i))), i));
    return layer;
}

MoeResult moe_forward(const HMoELayer& layer, const Tensor& x, RoutingMode mode, double k_or_p)
{
    if (x.rank() != 2 || x.dim(1) != layer.router.h_input)
        throw DimensionError("moe_forward: input " + shape_str(x.shape()) + " does not match h_input " +
                             std::to_string(layer.router.h_input));
    return moe_forward(layer, x, route(router_probs(layer.router, x), mode, k_or_p));
}

MoeResult moe_forward(const HMoELayer& layer, const Tensor& x, RoutingDecision decision)
{
    const std::size_t tokens = x.dim(0), width = x.dim(1), n = layer.experts.size();
    if (decision.tokens() != tokens || decision.experts() != n)
        throw DimensionError("moe_forward: decision does not match input/expert count");

    std::vector<std::vector<std::size_t>> lists(n);
    for (std::size_t t = 0; t < tokens; ++t) {
        if (decision.activated[t].empty())
            throw ContractError("moe_forward: token " + std::to_string(t) + " activated no expert");
        for (std::size_t e = 0; e < n; ++e)
            if (decision.mask[t * n + e])
                lists[e].push_back(t);
    }

    MoeResult result;
    result.expert_evaluations.resize(n);
    std::vector<Tensor> outputs(n);
    for (std::size_t e = 0; e < n; ++e) {
        result.expert_evaluations[e] = lists[e].size();
        if (lists[e].empty()) {
            outputs[e] = Tensor::zeros({0, width});
            continue;
        }
        outputs[e] = expert_forward(layer.experts[e], ops::gather_rows(x, lists[e]));
    }
    result.output = ops::moe_combine(decision.gates, outputs, lists, width);
    result.decision = std::move(decision);
    return result;
}

AssignmentStats layer_stats(const RoutingDecision& decision, const HeterogeneityProfile& profile)
{
    return assignment_stats(decision, profile.h_ffn);
}

} // namespace hmoe
