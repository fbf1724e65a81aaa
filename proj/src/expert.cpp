#include "hmoe/expert.hpp"

#include "hmoe/error.hpp"
#include "hmoe/ops.hpp"
#include "hmoe/rng.hpp"

#include <cmath>

namespace hmoe {

namespace {

Tensor normal_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev)
{
    std::vector<double> v(rows * cols);
    for (auto& x : v)
        x = rng.normal() * stddev;
    return Tensor::from({rows, cols}, std::move(v), true);
}

} // namespace

Expert new_expert(std::int64_t h_input, std::int64_t h_ffn, std::uint64_t seed, std::size_t index)
{
    if (h_input < 1 || h_ffn < 1)
        throw ConfigError("expert dimensions must be positive, got h_input=" + std::to_string(h_input) +
                          " h_ffn=" + std::to_string(h_ffn));
    const auto in = static_cast<std::size_t>(h_input);
    const auto hidden = static_cast<std::size_t>(h_ffn);
    const double stddev = std::sqrt(2.0 / static_cast<double>(in + hidden));
    Rng rng(seed);
    Expert e;
    e.index = index;
    e.h_input = in;
    e.h_ffn = hidden;
    e.w_gate = normal_matrix(rng, hidden, in, stddev);
    e.w_proj = normal_matrix(rng, hidden, in, stddev);
    e.w_out = normal_matrix(rng, in, hidden, stddev);
    return e;
}

Tensor expert_forward(const Expert& e, const Tensor& x)
{
    if (x.rank() != 2 || x.dim(1) != e.h_input)
        throw DimensionError("expert_forward: input " + shape_str(x.shape()) + " does not match h_input " +
                             std::to_string(e.h_input));
    Tensor gate = ops::silu(ops::linear_rowwise(x, e.w_gate));
    Tensor hidden = ops::mul(gate, ops::linear_rowwise(x, e.w_proj));
    return ops::linear_rowwise(hidden, e.w_out);
}

std::size_t param_count(const Expert& e) noexcept { return expert_param_count(e.h_input, e.h_ffn); }

} // namespace hmoe
