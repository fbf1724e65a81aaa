#pragma once

#include "hmoe/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

// Differentiable operations. Every op validates shapes up front and throws
// DimensionError naming both operands on mismatch. Broadcasting is limited to
// promoting a rank-1 operand across the rows of a matrix (bias/gain style).
namespace hmoe::ops {

Tensor matmul(const Tensor& a, const Tensor& b);

// x[T x in] times w[out x in] transposed -> [T x out].
Tensor linear(const Tensor& x, const Tensor& w);

// Same as linear, but each output row is bit-identical to running that row
// alone. Slower than the blocked product.
Tensor linear_rowwise(const Tensor& x, const Tensor& w);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor silu(const Tensor& x);

// Axis is counted from the front; pass rank-1 (or -1) for the last axis.
Tensor softmax(const Tensor& x, int axis = -1);

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

// Per-row negative log-likelihood, no graph. Used by evaluation and analysis.
std::vector<double> token_nll(const Tensor& logits, std::span<const std::int32_t> targets);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Rows of table[V x d] selected by ids -> [ids.size() x d].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

// Row-wise x / rms(x) * gain.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

// Multi-head causal self-attention over q,k,v of shape [batch*seq x heads*head_dim].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                        std::size_t seq, std::size_t heads);

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

// out[t] = sum over experts i (ascending) of gates[t,i] * outputs[i][r] for
// each (r, t = token_lists[i][r]). outputs[i] has shape [token_lists[i].size() x width].
Tensor moe_combine(const Tensor& gates, const std::vector<Tensor>& outputs,
                   const std::vector<std::vector<std::size_t>>& token_lists, std::size_t width);

// Mean over rows of x[T x N] -> [N].
Tensor column_mean(const Tensor& x);

// Sum_i x_i * weights_i with constant weights -> scalar.
Tensor dot_const(const Tensor& x, std::span<const double> weights);

// Mean over rows of -sum_i p_i log p_i, with 0 log 0 = 0.
Tensor entropy_mean(const Tensor& probs);

// gates[t,i] = probs[t,i] / sum_{j in mask_t} probs[t,j] for masked entries, 0 elsewhere.
Tensor renormalize_selected(const Tensor& probs, std::span<const std::uint8_t> mask);

} // namespace hmoe::ops
