#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>

#include "coordrl/diffcore/params.hpp"

namespace coordrl {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Weight decay is fixed at zero.
};

struct AdamState {
  AdamConfig config;
  ParamSet first_moment;
  ParamSet second_moment;
  std::int64_t step = 0;

  AdamState() = default;
  AdamState(const ParamSet& params, AdamConfig cfg)
      : config(cfg), first_moment(params.zeros_like()), second_moment(params.zeros_like()) {}
};

/// One bias-corrected Adam update. `lr_override` replaces the configured
/// learning rate for this step, e.g. for a schedule.
inline void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state,
                      std::optional<double> lr_override = std::nullopt) {
  if (!params.same_layout(grads) || !params.same_layout(state.first_moment))
    throw ShapeError("adam_step: parameter, gradient and state layouts differ");
  const auto& cfg = state.config;
  const double lr = lr_override.value_or(cfg.learning_rate);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params) {
    const Tensor& g = grads[name];
    Tensor& m = state.first_moment[name];
    Tensor& v = state.second_moment[name];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

/// Cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
inline double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return base_lr;
  const double pi = 3.14159265358979323846;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base_lr * (1.0 + std::cos(pi * std::min(frac, 1.0)));
}

}  // namespace coordrl
