#include "hmoe/routing.hpp"

#include "hmoe/error.hpp"
#include "hmoe/ops.hpp"
#include "hmoe/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hmoe {

std::string to_string(RoutingMode mode)
{
    return mode == RoutingMode::kTopK ? "top_k" : "top_p";
}

RoutingMode parse_routing_mode(const std::string& text)
{
    if (text == "top_k")
        return RoutingMode::kTopK;
    if (text == "top_p")
        return RoutingMode::kTopP;
    throw ConfigError("unknown routing mode '" + text + "' (expected top_k or top_p)");
}

Router new_router(std::size_t experts, std::size_t h_input, std::uint64_t seed)
{
    if (experts < 1 || h_input < 1)
        throw ConfigError("router needs at least one expert and a positive input width");
    Rng rng(seed);
    const double stddev = std::sqrt(2.0 / static_cast<double>(experts + h_input));
    std::vector<double> w(experts * h_input);
    for (auto& v : w)
        v = rng.normal() * stddev;
    return Router{Tensor::from({experts, h_input}, std::move(w), true), experts, h_input};
}

Tensor router_probs(const Router& router, const Tensor& x)
{
    if (x.rank() != 2 || x.dim(1) != router.h_input)
        throw DimensionError("router_probs: input " + shape_str(x.shape()) + " does not match router " +
                             shape_str(router.weight.shape()));
    return ops::softmax(ops::linear(x, router.weight), -1);
}

std::vector<std::size_t> descending_order(const double* row, std::size_t n)
{
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    return idx;
}

namespace {

RoutingDecision finish(const Tensor& probs, std::vector<std::vector<std::size_t>> activated)
{
    const std::size_t n = probs.dim(1);
    RoutingDecision d;
    d.probs = probs;
    d.mask.assign(activated.size() * n, 0);
    for (std::size_t t = 0; t < activated.size(); ++t)
        for (auto e : activated[t])
            d.mask[t * n + e] = 1;
    d.gates = ops::renormalize_selected(probs, d.mask);
    d.activated = std::move(activated);
    return d;
}

void require_probs(const Tensor& probs)
{
    if (probs.rank() != 2 || probs.dim(1) == 0)
        throw DimensionError("routing expects probabilities of shape [T x N], got " + shape_str(probs.shape()));
}

} // namespace

RoutingDecision select_top_k(const Tensor& probs, std::int64_t k)
{
    require_probs(probs);
    const std::size_t tokens = probs.dim(0), n = probs.dim(1);
    if (k < 1 || static_cast<std::size_t>(k) > n)
        throw ConfigError("top-k requires 1 <= k <= " + std::to_string(n) + ", got k=" + std::to_string(k));
    const auto& p = probs.data();
    std::vector<std::vector<std::size_t>> activated(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
        auto order = descending_order(p.data() + t * n, n);
        order.resize(static_cast<std::size_t>(k));
        activated[t] = std::move(order);
    }
    return finish(probs, std::move(activated));
}

RoutingDecision select_top_p(const Tensor& probs, double threshold)
{
    require_probs(probs);
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw ConfigError("top-p threshold must lie in (0, 1], got " + std::to_string(threshold));
    const std::size_t tokens = probs.dim(0), n = probs.dim(1);
    const auto& p = probs.data();
    std::vector<std::vector<std::size_t>> activated(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
        const double* row = p.data() + t * n;
        auto order = descending_order(row, n);
        // Minimal prefix reaching the threshold; the full set if rounding keeps it short.
        double cumulative = 0.0;
        std::size_t count = n;
        for (std::size_t j = 0; j < n; ++j) {
            cumulative += row[order[j]];
            if (cumulative >= threshold) {
                count = j + 1;
                break;
            }
        }
        order.resize(count);
        activated[t] = std::move(order);
    }
    return finish(probs, std::move(activated));
}

RoutingDecision route(const Tensor& probs, RoutingMode mode, double k_or_p)
{
    if (mode == RoutingMode::kTopK) {
        const double rounded = std::round(k_or_p);
        if (rounded != k_or_p)
            throw ConfigError("top-k requires an integer k, got " + std::to_string(k_or_p));
        return select_top_k(probs, static_cast<std::int64_t>(rounded));
    }
    return select_top_p(probs, k_or_p);
}

} // namespace hmoe
