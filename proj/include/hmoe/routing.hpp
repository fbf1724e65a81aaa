#pragma once

#include "hmoe/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace hmoe {

enum class RoutingMode
{
    kTopK,
    kTopP,
};

std::string to_string(RoutingMode mode);
RoutingMode parse_routing_mode(const std::string& text);

struct Router
{
    Tensor weight; // [N x h_input]
    std::size_t experts = 0;
    std::size_t h_input = 0;
};

Router new_router(std::size_t experts, std::size_t h_input, std::uint64_t seed);

// softmax(x W^T) row-wise: [T x h_input] -> [T x N].
Tensor router_probs(const Router& router, const Tensor& x);

/// Per-token expert selection.
///
/// `activated[t]` lists the chosen experts in descending probability order
/// (ties to the lower index). `gates` is [T x N], differentiable w.r.t.
/// `probs` through the renormalization only; zero outside the selection.
struct RoutingDecision
{
    Tensor probs;
    Tensor gates;
    std::vector<std::vector<std::size_t>> activated;
    std::vector<std::uint8_t> mask; // [T x N], 1 where activated

    std::size_t tokens() const noexcept { return activated.size(); }
    std::size_t experts() const { return probs.dim(1); }
    double gate(std::size_t token, std::size_t expert) const { return gates.data()[token * experts() + expert]; }
};

RoutingDecision select_top_k(const Tensor& probs, std::int64_t k);
RoutingDecision select_top_p(const Tensor& probs, double p);

// Dispatches on mode; `k_or_p` is k for Top-K and the threshold for Top-P.
RoutingDecision route(const Tensor& probs, RoutingMode mode, double k_or_p);

// Expert indices of one row sorted by descending value, ties to the lower index.
std::vector<std::size_t> descending_order(const double* row, std::size_t n);

} // namespace hmoe
