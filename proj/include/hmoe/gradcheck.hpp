#pragma once

#include "hmoe/tensor.hpp"

#include <functional>
#include <vector>

namespace hmoe {

/// Compares reverse-mode gradients against central differences.
///
/// Returns the maximum over coordinates of
///   |analytic - central| / (|analytic| + |central| + 1e-12).
/// `f` must return a scalar tensor. The single-tensor form treats `x` as the
/// only input; the parameter form perturbs each tensor in `params` in place
/// (restoring it afterwards) and re-evaluates `f`.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps = 1e-5);

} // namespace hmoe
