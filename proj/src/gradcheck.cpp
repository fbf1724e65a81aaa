#include "hmoe/gradcheck.hpp"

#include "hmoe/error.hpp"

#include <algorithm>
#include <cmath>

namespace hmoe {

namespace {

double scalar_of(const Tensor& t)
{
    if (t.numel() != 1)
        throw ContractError("finite_diff_check: function returned shape " + shape_str(t.shape()) +
                            ", expected a scalar");
    return t.item();
}

double relative_error(double analytic, double central)
{
    return std::abs(analytic - central) / (std::abs(analytic) + std::abs(central) + 1e-12);
}

} // namespace

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps)
{
    if (!(eps > 0.0))
        throw ContractError("finite_diff_check: eps must be positive");
    Tensor leaf = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
    return finite_diff_check([&] { return f(leaf); }, {leaf}, eps);
}

double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps)
{
    if (!(eps > 0.0))
        throw ContractError("finite_diff_check: eps must be positive");
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    {
        Tensor loss = f();
        scalar_of(loss);
        backward(loss);
    }
    double worst = 0.0;
    for (auto& p : params) {
        std::vector<double> analytic(p.numel(), 0.0);
        if (p.has_grad())
            std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = scalar_of(f());
            values[i] = saved - eps;
            const double down = scalar_of(f());
            values[i] = saved;
            worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * eps)));
        }
    }
    return worst;
}

} // namespace hmoe
