#pragma once

#include "hmoe/tensor.hpp"

#include <cstdint>
#include <vector>

namespace hmoe {

struct AdamWOptions
{
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

/// AdamW with decoupled weight decay. Parameters without a gradient this step
/// are treated as having a zero gradient.
class AdamW
{
public:
    AdamW(std::vector<Tensor> params, AdamWOptions options);

    void step(double lr);

    std::int64_t steps_taken() const noexcept { return t_; }
    const std::vector<std::vector<double>>& first_moments() const noexcept { return m_; }
    const std::vector<std::vector<double>>& second_moments() const noexcept { return v_; }

    // Restores moments and step count (checkpoint resume). Sizes must match.
    void restore(std::int64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

private:
    std::vector<Tensor> params_;
    AdamWOptions opt_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

} // namespace hmoe
