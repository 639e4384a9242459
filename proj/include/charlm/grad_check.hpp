#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "charlm/tensor.hpp"

namespace charlm {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares backward() against central differences for every coordinate of
// every tensor in `params`. The relative error of one coordinate is
// |a - n| / max(|a|, |n|, floor); the floor keeps coordinates whose true
// gradient is ~0 from dividing round-off by round-off.
template <typename T, typename F>
GradCheckResult grad_check(F&& f, std::vector<Tensor<T>> params, double epsilon = 1e-5, double floor = 1e-6) {
  for (auto& p : params) p.zero_grad();
  backward(f());
  std::vector<std::vector<T>> analytic;
  for (auto& p : params) {
    analytic.emplace_back(p.size(), T{});
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.back().begin());
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + static_cast<T>(epsilon);
      const double up = static_cast<double>(f().item());
      values[i] = saved - static_cast<T>(epsilon);
      const double down = static_cast<double>(f().item());
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = static_cast<double>(analytic[k][i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_rel_error) result = {rel, k, i, a, numeric};
    }
  }
  return result;
}

}  // namespace charlm
