#include "hmoe/optim.hpp"

#include "hmoe/error.hpp"

#include <cmath>

namespace hmoe {

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions options) : params_(std::move(params)), opt_(options)
{
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void AdamW::step(double lr)
{
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto w = params_[i].mutable_data();
        const auto g = params_[i].grad();
        const bool has = !g.empty();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double grad = has ? g[j] : 0.0;
            m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * grad;
            v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * grad * grad;
            const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opt_.eps);
            w[j] -= lr * (update + opt_.weight_decay * w[j]);
        }
    }
}

void AdamW::restore(std::int64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v)
{
    if (m.size() != params_.size() || v.size() != params_.size())
        throw FormatError("optimizer state covers a different parameter set");
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (m[i].size() != params_[i].numel() || v[i].size() != params_[i].numel())
            throw FormatError("optimizer moment size mismatch for parameter " + std::to_string(i));
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
}

} // namespace hmoe
