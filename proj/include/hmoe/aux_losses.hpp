#pragma once

#include "hmoe/routing.hpp"
#include "hmoe/tensor.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace hmoe {

/// Batch statistics behind the balancing losses.
///
/// token_fraction[i] is the share of tokens that activated expert i (a
/// constant with respect to the graph); mean_prob is the differentiable
/// per-expert mean router probability. size_weighted[i] = token_fraction[i]
/// * size_norm[i], where size_norm divides each hidden size by the mean size.
struct AssignmentStats
{
    std::size_t tokens = 0;
    std::vector<double> token_fraction;
    Tensor mean_prob;
    std::vector<double> size_norm;
    std::vector<double> size_weighted;

    std::size_t experts() const noexcept { return token_fraction.size(); }
};

// Builds stats from a routing decision. `hidden_sizes` may be empty, in
// which case the size terms stay empty and p_penalty_loss refuses the stats.
AssignmentStats assignment_stats(const RoutingDecision& decision, const std::vector<std::size_t>& hidden_sizes);

// N * sum_i T_i * Phat_i
Tensor load_balance_loss(const AssignmentStats& stats, std::size_t experts);

// N * sum_i M_i * Phat_i
Tensor p_penalty_loss(const AssignmentStats& stats, std::size_t experts);

enum class EntropySign
{
    kPositive,  // mean_t -sum_i P log P, minimised -> sharper routing
    kAsPrinted, // N * mean_t sum_i P log P
};

std::string to_string(EntropySign sign);
EntropySign parse_entropy_sign(const std::string& text);

Tensor entropy_loss(const Tensor& probs, EntropySign sign = EntropySign::kPositive);

enum class ObjectiveMode
{
    kTopK,     // lm + pp * L_pp
    kTopP,     // lm + pp * L_pp + ent * L_ent
    kBaseline, // lm + lb * L_lb
};

ObjectiveMode parse_objective_mode(const std::string& text);
std::string to_string(ObjectiveMode mode);

struct AuxCoefficients
{
    double load_balance = 0.01;
    double p_penalty = 0.1;
    double entropy = 0.03;
};

struct AuxLossReport
{
    Tensor lb;
    Tensor p_penalty;
    Tensor entropy;
    AuxCoefficients coefficients;
    Tensor combined;
};

Tensor total_objective(const Tensor& lm_loss, const AuxLossReport& report, ObjectiveMode mode);

} // namespace hmoe
