#pragma once

#include "hmoe/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace hmoe {

/// SiLU-gated feed-forward expert:
///   e(x) = W_out (SiLU(W_gate x) * (W_proj x))
/// with W_gate, W_proj of shape [h_ffn x h_input] and W_out of shape
/// [h_input x h_ffn]. No biases.
struct Expert
{
    std::size_t index = 0;
    std::size_t h_input = 0;
    std::size_t h_ffn = 0;
    Tensor w_gate;
    Tensor w_proj;
    Tensor w_out;

    std::vector<Tensor> parameters() const { return {w_gate, w_proj, w_out}; }
};

// Glorot-normal init, std = sqrt(2 / (h_input + h_ffn)); deterministic in seed.
Expert new_expert(std::int64_t h_input, std::int64_t h_ffn, std::uint64_t seed, std::size_t index = 0);

// x: [T x h_input] -> [T x h_input].
Tensor expert_forward(const Expert& e, const Tensor& x);

// 3 * h_input * h_ffn.
std::size_t param_count(const Expert& e) noexcept;
constexpr std::size_t expert_param_count(std::size_t h_input, std::size_t h_ffn) noexcept
{
    return 3 * h_input * h_ffn;
}

} // namespace hmoe
