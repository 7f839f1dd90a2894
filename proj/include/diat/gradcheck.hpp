#pragma once

#include <functional>
#include <vector>

#include "diat/tensor.hpp"

namespace diat {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_leaf = 0;
  std::int64_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares tape gradients of the scalar `f()` w.r.t. every entry of each
/// leaf against central differences (f(x+eps) - f(x-eps)) / (2 eps).
/// Leaves must be 64-bit; they are perturbed in place and restored.
/// Relative error uses the denominator max(|a|, |b|, 1e-8).
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                           double eps = 1e-5);

/// Single-input form: f is applied to a trainable copy of x.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

}  // namespace diat
