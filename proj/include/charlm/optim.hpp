#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "charlm/config.hpp"
#include "charlm/layers.hpp"

namespace charlm {

template <typename T>
struct OptimizerState {
  AdamConfig hyper;
  std::size_t step = 0;
  std::vector<std::vector<T>> first_moment;   // one per parameter, same order
  std::vector<std::vector<T>> second_moment;

  static OptimizerState for_params(const ParamList<T>& params, AdamConfig hyper) {
    OptimizerState s;
    s.hyper = hyper;
    for (const auto& p : params) {
      s.first_moment.emplace_back(p.tensor.size(), T{});
      s.second_moment.emplace_back(p.tensor.size(), T{});
    }
    return s;
  }
};

// Bias-corrected Adam. Parameters without a gradient are treated as having a
// zero gradient. Non-finite gradients abort before anything is modified.
template <typename T>
void adam_step(const ParamList<T>& params, OptimizerState<T>& state, double lr) {
  if (state.first_moment.size() != params.size()) throw ShapeMismatch("optimizer state does not match parameters");
  for (const auto& p : params) {
    for (const T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NonFiniteGradient("parameter " + p.name);
    }
  }
  ++state.step;
  const auto& h = state.hyper;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto tensor = params[k].tensor;
    auto values = tensor.mutable_values();
    const auto grad = tensor.grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != values.size()) throw ShapeMismatch("moment size for " + params[k].name);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
      const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + h.epsilon);
      values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
    }
  }
}

template <typename T>
double global_grad_norm(const ParamList<T>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    for (const T g : p.tensor.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(total);
}

// Rescales all gradients so their joint L2 norm is at most max_norm; returns
// the norm before clipping. An infinite threshold leaves gradients untouched.
template <typename T>
double clip_grad_norm(const ParamList<T>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (!std::isfinite(norm)) throw NonFiniteGradient("global gradient norm is not finite");
  if (std::isinf(max_norm) || norm <= max_norm || norm == 0.0) return norm;
  const T factor = static_cast<T>(max_norm / norm);
  for (const auto& p : params) {
    auto t = p.tensor;
    if (!t.has_grad()) continue;
    for (auto& g : t.mutable_grad()) g *= factor;
  }
  return norm;
}

// Learning rate at `step`:
//   constant: base
//   custom:   base * min(step / warmup, 1) * rsqrt(max(step, warmup)), times a
//             linear ramp to 0 over the final decay_steps of total_steps
//   cosine:   min + (base - min) * (1 + cos(pi * step / total)) / 2
inline double lr_schedule(std::size_t step, const ScheduleConfig& s) {
  if (s.base_lr < 0.0 || s.min_lr < 0.0) throw InvalidConfig("learning rates must be non-negative");
  const double t = static_cast<double>(step);
  switch (s.kind) {
    case ScheduleKind::constant:
      return s.base_lr;
    case ScheduleKind::custom_warmup_rsqrt: {
      if (s.warmup_steps == 0) throw InvalidConfig("custom schedule needs warmup_steps > 0");
      const double warmup = static_cast<double>(s.warmup_steps);
      double lr = s.base_lr * std::min(t / warmup, 1.0) / std::sqrt(std::max(t, warmup));
      if (s.decay_steps > 0) {
        if (s.total_steps < s.decay_steps) throw InvalidConfig("decay window longer than training");
        const std::size_t decay_start = s.total_steps - s.decay_steps;
        if (step > decay_start) {
          const double left = step >= s.total_steps ? 0.0 : static_cast<double>(s.total_steps - step);
          lr *= left / static_cast<double>(s.decay_steps);
        }
      }
      return lr;
    }
    case ScheduleKind::cosine: {
      if (s.total_steps == 0) throw InvalidConfig("cosine schedule needs total_steps > 0");
      const double progress = std::min(t, static_cast<double>(s.total_steps)) / static_cast<double>(s.total_steps);
      return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
    }
  }
  throw InvalidConfig("unknown schedule");
}

}  // namespace charlm
