#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

#include "coordrl/diffcore/graph.hpp"
#include "coordrl/diffcore/params.hpp"

namespace coordrl {

/// Builds a scalar loss from bound parameters. Must be a pure function of the
/// parameter values: anything random has to be frozen outside of it.
using LossBuilder = std::function<ad::Var(ad::Graph&, const BoundParams&)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// 2: (f(x+h) - f(x-h)) / 2h.  4: the five-point central stencil, which cuts
  /// truncation error enough to allow a larger h and hence less rounding noise.
  int order = 2;
  /// Components whose analytic and numeric magnitudes are both <= this are skipped.
  double magnitude_floor = 1e-8;
  /// Restrict the check to some parameters; all when unset.
  std::function<bool(const std::string&)> include;
};

struct GradCheckReport {
  bool valid = true;  // false when the loss is not deterministic
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

inline double evaluate_loss(const LossBuilder& loss_fn, const ParamSet& params) {
  ad::Graph g;
  BoundParams bound(g, params);
  return loss_fn(g, bound).item();
}

inline ParamSet analytic_gradients(const LossBuilder& loss_fn, const ParamSet& params) {
  ad::Graph g;
  BoundParams bound(g, params);
  g.backward(loss_fn(g, bound));
  return bound.gradients();
}

/// Central-difference comparison of every (included) gradient component.
inline GradCheckReport grad_check(const LossBuilder& loss_fn, const ParamSet& params,
                                  const GradCheckOptions& opts = {}) {
  if (opts.order != 2 && opts.order != 4) throw std::invalid_argument("grad_check order must be 2 or 4");
  GradCheckReport report;
  const double f0 = evaluate_loss(loss_fn, params);
  const double f0_again = evaluate_loss(loss_fn, params);
  if (!(f0 == f0_again) || !std::isfinite(f0)) {
    report.valid = false;
    return report;
  }
  const ParamSet analytic = analytic_gradients(loss_fn, params);
  ParamSet probe = params;
  for (const auto& [name, tensor] : params) {
    if (opts.include && !opts.include(name)) continue;
    Tensor& p = probe[name];
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double orig = p[i];
      auto at = [&](double offset) {
        p[i] = orig + offset;
        return evaluate_loss(loss_fn, probe);
      };
      const double h = opts.step;
      double numeric = 0.0;
      if (opts.order == 4)
        numeric = (-at(2 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2 * h)) / (12.0 * h);
      else
        numeric = (at(h) - at(-h)) / (2.0 * h);
      p[i] = orig;
      const double a = analytic[name][i];
      const double mag = std::max(std::abs(a), std::abs(numeric));
      if (mag <= opts.magnitude_floor) {
        ++report.skipped;
        continue;
      }
      ++report.checked;
      const double rel = std::abs(a - numeric) / mag;
      if (rel >= report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace coordrl
