#include "diat/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace diat {

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double eps) {
  for (const auto& l : leaves)
    if (l.dtype() != DType::f64) throw std::invalid_argument("grad_check requires 64-bit leaves");

  std::vector<bool> saved_flags;
  for (auto& l : leaves) {
    saved_flags.push_back(l.requires_grad());
    l.set_requires_grad(true);
    l.clear_grad();
  }
  {
    GradTape tape;
    Tensor y = f();
    tape.backward(y);
  }

  auto eval = [&]() {
    NoGradGuard guard;
    return f().item();
  };

  GradCheckResult result;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    const Tensor g = leaf.grad();
    auto values = leaf.mutable_data<double>();
    for (std::int64_t i = 0; i < leaf.numel(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double fp = eval();
      values[i] = orig - eps;
      const double fm = eval();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = g.defined() ? g.at(i) : 0.0;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > result.max_rel_error || (li == 0 && i == 0)) {
        result = GradCheckResult{rel, li, i, analytic, numeric};
      }
    }
  }
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    leaves[li].clear_grad();
    leaves[li].set_requires_grad(saved_flags[li]);
  }
  return result;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.clone();
  return grad_check([&] { return f(leaf); }, {leaf}, eps).max_rel_error;
}

}  // namespace diat
