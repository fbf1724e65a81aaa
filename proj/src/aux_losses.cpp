#include "hmoe/aux_losses.hpp"

#include "hmoe/error.hpp"
#include "hmoe/ops.hpp"

#include <cmath>
#include <numeric>

namespace hmoe {

AssignmentStats assignment_stats(const RoutingDecision& decision, const std::vector<std::size_t>& hidden_sizes)
{
    const std::size_t tokens = decision.tokens();
    const std::size_t n = decision.experts();
    if (tokens == 0)
        throw ContractError("assignment stats need at least one token");
    AssignmentStats s;
    s.tokens = tokens;
    s.token_fraction.assign(n, 0.0);
    std::vector<std::size_t> counts(n, 0);
    for (const auto& set : decision.activated)
        for (auto e : set)
            ++counts[e];
    for (std::size_t i = 0; i < n; ++i)
        s.token_fraction[i] = static_cast<double>(counts[i]) / static_cast<double>(tokens);
    s.mean_prob = ops::column_mean(decision.probs);
    if (!hidden_sizes.empty()) {
        if (hidden_sizes.size() != n)
            throw ContractError("size profile has " + std::to_string(hidden_sizes.size()) + " entries for " +
                                std::to_string(n) + " experts");
        const double mean_size =
            static_cast<double>(std::accumulate(hidden_sizes.begin(), hidden_sizes.end(), std::size_t{0})) /
            static_cast<double>(n);
        s.size_norm.resize(n);
        s.size_weighted.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            s.size_norm[i] = static_cast<double>(hidden_sizes[i]) / mean_size;
            s.size_weighted[i] = s.token_fraction[i] * s.size_norm[i];
        }
    }
    return s;
}

namespace {

void check_experts(const AssignmentStats& stats, std::size_t experts, const char* loss)
{
    if (stats.experts() != experts || stats.mean_prob.numel() != experts)
        throw ContractError(std::string(loss) + ": stats cover " + std::to_string(stats.experts()) +
                            " experts, expected " + std::to_string(experts));
}

} // namespace

Tensor load_balance_loss(const AssignmentStats& stats, std::size_t experts)
{
    check_experts(stats, experts, "load_balance_loss");
    std::vector<double> w(experts);
    for (std::size_t i = 0; i < experts; ++i)
        w[i] = static_cast<double>(experts) * stats.token_fraction[i];
    return ops::dot_const(stats.mean_prob, w);
}

Tensor p_penalty_loss(const AssignmentStats& stats, std::size_t experts)
{
    check_experts(stats, experts, "p_penalty_loss");
    if (stats.size_weighted.size() != experts)
        throw ContractError("p_penalty_loss: stats carry no expert size profile");
    std::vector<double> w(experts);
    for (std::size_t i = 0; i < experts; ++i)
        w[i] = static_cast<double>(experts) * stats.size_weighted[i];
    return ops::dot_const(stats.mean_prob, w);
}

std::string to_string(EntropySign sign)
{
    return sign == EntropySign::kPositive ? "positive" : "as_printed";
}

EntropySign parse_entropy_sign(const std::string& text)
{
    if (text == "positive")
        return EntropySign::kPositive;
    if (text == "as_printed")
        return EntropySign::kAsPrinted;
    throw ConfigError("unknown entropy sign '" + text + "' (expected positive or as_printed)");
}

Tensor entropy_loss(const Tensor& probs, EntropySign sign)
{
    if (probs.rank() != 2)
        throw DimensionError("entropy_loss expects [T x N] probabilities, got " + shape_str(probs.shape()));
    const std::size_t rows = probs.dim(0), n = probs.dim(1);
    const auto& p = probs.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            total += p[r * n + i];
        if (std::abs(total - 1.0) > 1e-6)
            throw ContractError("entropy_loss: row " + std::to_string(r) + " sums to " + std::to_string(total));
    }
    Tensor h = ops::entropy_mean(probs);
    if (sign == EntropySign::kPositive)
        return h;
    return ops::scale(h, -static_cast<double>(n));
}

ObjectiveMode parse_objective_mode(const std::string& text)
{
    if (text == "top_k")
        return ObjectiveMode::kTopK;
    if (text == "top_p")
        return ObjectiveMode::kTopP;
    if (text == "baseline")
        return ObjectiveMode::kBaseline;
    throw ConfigError("unknown objective mode '" + text + "' (expected top_k, top_p or baseline)");
}

std::string to_string(ObjectiveMode mode)
{
    switch (mode) {
    case ObjectiveMode::kTopK:
        return "top_k";
    case ObjectiveMode::kTopP:
        return "top_p";
    case ObjectiveMode::kBaseline:
        return "baseline";
    }
    return "unknown";
}

Tensor total_objective(const Tensor& lm_loss, const AuxLossReport& report, ObjectiveMode mode)
{
    const auto& c = report.coefficients;
    auto term = [](const Tensor& loss, double coef, const char* name) {
        if (!loss.defined())
            throw ContractError(std::string("total_objective: missing ") + name + " term");
        return ops::scale(loss, coef);
    };
    switch (mode) {
    case ObjectiveMode::kTopK:
        return ops::add(lm_loss, term(report.p_penalty, c.p_penalty, "p_penalty"));
    case ObjectiveMode::kTopP:
        return ops::add(ops::add(lm_loss, term(report.p_penalty, c.p_penalty, "p_penalty")),
                        term(report.entropy, c.entropy, "entropy"));
    case ObjectiveMode::kBaseline:
        return ops::add(lm_loss, term(report.lb, c.load_balance, "load_balance"));
    }
    throw ConfigError("unknown objective mode");
}

} // namespace hmoe
