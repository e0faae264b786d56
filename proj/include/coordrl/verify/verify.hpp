#pragma once

// Self-verification suites run before training. Each suite checks library
// code against an independent computation (direct pdf products, Monte-Carlo
// estimates, analytic CDFs, finite differences) and returns one report.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "coordrl/diffcore/grad_check.hpp"
#include "coordrl/env/env.hpp"
#include "coordrl/grpo/grpo.hpp"
#include "coordrl/policy/coord_policy.hpp"
#include "coordrl/policy/network.hpp"
#include "coordrl/rng.hpp"
#include "coordrl/sft/sft.hpp"

namespace coordrl {

struct SuiteReport {
  std::string name;
  bool passed = false;
  std::size_t cases = 0;
  double worst = 0.0;      // suite-specific statistic, compared against threshold
  double threshold = 0.0;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  // ratio
  std::size_t ratio_cases = 10000;
  double ratio_tol = 1e-10;
  double reduction_tol = 1e-12;
  // KL
  std::size_t kl_pairs = 20;
  std::size_t kl_samples = 1000000;
  double kl_max_se = 3.0;
  // samplers
  std::size_t ks_samples = 100000;
  double ks_alpha = 1e-3;
  std::size_t variance_samples = 1000000;
  double variance_band = 0.015;
  // gradients
  double grad_tol = 1e-5;
};

inline void write_report(std::ostream& os, const SuiteReport& r) {
  std::ostringstream worst, thr;
  worst.precision(6);
  thr.precision(6);
  worst << r.worst;
  thr << r.threshold;
  os << "suite name=" << r.name << " passed=" << (r.passed ? "true" : "false") << " cases=" << r.cases
     << " worst=" << worst.str() << " threshold=" << thr.str();
  if (!r.detail.empty()) os << " detail=\"" << r.detail << '"';
  os << '\n';
}

namespace detail {

inline const std::array<std::pair<Family, Sharing>, 4> kVariants{{
    {Family::gaussian, Sharing::shared},
    {Family::gaussian, Sharing::independent},
    {Family::laplace, Sharing::shared},
    {Family::laplace, Sharing::independent},
}};

inline std::string variant_name(Family f, Sharing s) { return to_string(f) + "/" + to_string(s); }

inline CoordPolicyParams random_params(Family f, Sharing s, Rng& rng, double lo = 0.05, double hi = 0.5) {
  std::uniform_real_distribution<double> mu(0.0, 1.0), sc(lo, hi);
  std::array<double, kBoxDims> m{};
  for (auto& v : m) v = mu(rng);
  if (s == Sharing::shared) return CoordPolicyParams::make_shared(f, m, sc(rng));
  std::array<double, kBoxDims> d{};
  for (auto& v : d) v = sc(rng);
  return CoordPolicyParams::make_independent(f, m, d);
}

/// Density written directly as a product of one-dimensional pdfs.
inline double pdf_product(const BoxAction& b, const CoordPolicyParams& p) {
  double out = 1.0;
  for (std::size_t j = 0; j < kBoxDims; ++j) {
    const double s = p.scale[j];
    const double z = b[j] - p.mu[j];
    out *= p.family == Family::gaussian
               ? std::exp(-z * z / (2.0 * s * s)) / (s * std::sqrt(2.0 * std::numbers::pi))
               : std::exp(-std::abs(z) / s) / (2.0 * s);
  }
  return out;
}

inline double rel_err(double a, double b) {
  const double m = std::max(std::abs(a), std::abs(b));
  return m == 0.0 ? 0.0 : std::abs(a - b) / m;
}

/// Kolmogorov distribution tail P(K > lambda).
inline double kolmogorov_q(double lambda) {
  if (lambda < 0.2) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 ? 1.0 : -1.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

/// One-sample KS p-value of `xs` (sorted in place) against `cdf`.
template <class Cdf>
double ks_pvalue(std::vector<double>& xs, Cdf cdf, double* stat = nullptr) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  if (stat) *stat = d;
  const double sn = std::sqrt(n);
  return kolmogorov_q((sn + 0.12 + 0.11 / sn) * d);
}

}  // namespace detail

/// Closed-form log-ratios against the ratio of directly evaluated densities,
/// plus the reduction of per-coordinate scales to a shared scale.
inline SuiteReport suite_ratio_consistency(const VerifyOptions& opt = {}) {
  SuiteReport r{"ratio_consistency", true, 0, 0.0, opt.ratio_tol, {}};
  Rng rng = make_rng(opt.seed, {0x7a710});
  std::string worst_variant;
  for (const auto& [f, s] : detail::kVariants) {
    for (std::size_t c = 0; c < opt.ratio_cases; ++c) {
      const auto old = detail::random_params(f, s, rng);
      const auto next = detail::random_params(f, s, rng);
      const BoxAction b = sample(old, rng).action;
      const double oracle = detail::pdf_product(b, next) / detail::pdf_product(b, old);
      const double got = importance_ratio(b, next, old);
      const double e = detail::rel_err(got, oracle);
      ++r.cases;
      if (std::isnan(e) || e > r.worst) {
        r.worst = std::isnan(e) ? INFINITY : e;
        worst_variant = detail::variant_name(f, s);
      }
    }
  }
  double worst_reduction = 0.0;
  for (Family f : {Family::gaussian, Family::laplace}) {
    for (std::size_t c = 0; c < opt.ratio_cases; ++c) {
      const auto old_s = detail::random_params(f, Sharing::shared, rng);
      const auto next_s = detail::random_params(f, Sharing::shared, rng);
      const auto old_i = CoordPolicyParams::make_independent(f, old_s.mu, old_s.scale);
      const auto next_i = CoordPolicyParams::make_independent(f, next_s.mu, next_s.scale);
      const BoxAction b = sample(old_s, rng).action;
      const double e = detail::rel_err(importance_ratio(b, next_i, old_i), importance_ratio(b, next_s, old_s));
      worst_reduction = std::max(worst_reduction, std::isnan(e) ? INFINITY : e);
      ++r.cases;
    }
  }
  r.passed = r.worst <= opt.ratio_tol && worst_reduction <= opt.reduction_tol;
  std::ostringstream d;
  d.precision(3);
  d << "worst variant " << worst_variant << "; shared reduction max rel err " << worst_reduction
    << " (tol " << opt.reduction_tol << ")";
  r.detail = d.str();
  return r;
}

/// Full diagonal-Gaussian KL against Monte-Carlo estimates; `worst` is the
/// largest deviation in standard errors. Also checks the mean-only KL.
inline SuiteReport suite_kl_montecarlo(const VerifyOptions& opt = {}) {
  SuiteReport r{"kl_montecarlo", true, 0, 0.0, opt.kl_max_se, {}};
  Rng rng = make_rng(opt.seed, {0x6b1});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t mean_only_mismatch = 0;
  for (std::size_t k = 0; k < opt.kl_pairs; ++k) {
    const Sharing s = k % 2 ? Sharing::independent : Sharing::shared;
    const auto p = detail::random_params(Family::gaussian, s, rng, 0.1, 0.5);
    const auto q = detail::random_params(Family::gaussian, s, rng, 0.1, 0.5);
    const double closed = kl_gaussian_full(p, q);
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t i = 0; i < opt.kl_samples; ++i) {
      double lr = 0.0;
      for (std::size_t j = 0; j < kBoxDims; ++j) {
        const double x = p.mu[j] + p.scale[j] * normal(rng);
        const double zp = (x - p.mu[j]) / p.scale[j], zq = (x - q.mu[j]) / q.scale[j];
        lr += std::log(q.scale[j] / p.scale[j]) - 0.5 * zp * zp + 0.5 * zq * zq;
      }
      sum += lr;
      sum_sq += lr * lr;
    }
    const double n = static_cast<double>(opt.kl_samples);
    const double mean = sum / n;
    const double se = std::sqrt(std::max(0.0, sum_sq / n - mean * mean) / n);
    const double z = se > 0.0 ? std::abs(mean - closed) / se : (mean == closed ? 0.0 : INFINITY);
    r.worst = std::max(r.worst, z);
    ++r.cases;

    double direct = 0.0;
    for (std::size_t j = 0; j < kBoxDims; ++j) direct += (p.mu[j] - q.mu[j]) * (p.mu[j] - q.mu[j]);
    if (kl_mean_only(p.mu, q.mu) != direct) ++mean_only_mismatch;
  }
  r.passed = r.worst <= opt.kl_max_se && mean_only_mismatch == 0;
  r.detail = "mean-only mismatches " + std::to_string(mean_only_mismatch);
  return r;
}

/// KS tests of standardized reparameterized samples against the analytic CDF
/// (both families, every coordinate), plus the Laplace variance 2 alpha^2.
/// `worst` is the smallest KS p-value; the threshold is the significance level.
inline SuiteReport suite_sampler_distribution(const VerifyOptions& opt = {}) {
  SuiteReport r{"sampler_distribution", true, 0, 1.0, opt.ks_alpha, {}};
  Rng rng = make_rng(opt.seed, {0x5a3});
  auto gauss_cdf = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  auto laplace_cdf = [](double z) { return z < 0.0 ? 0.5 * std::exp(z) : 1.0 - 0.5 * std::exp(-z); };
  for (Family f : {Family::gaussian, Family::laplace}) {
    const auto p = detail::random_params(f, Sharing::independent, rng);
    std::array<std::vector<double>, kBoxDims> xs;
    for (auto& v : xs) v.reserve(opt.ks_samples);
    for (std::size_t i = 0; i < opt.ks_samples; ++i) {
      const BoxAction b = sample(p, rng).action;
      for (std::size_t j = 0; j < kBoxDims; ++j) xs[j].push_back((b[j] - p.mu[j]) / p.scale[j]);
    }
    for (std::size_t j = 0; j < kBoxDims; ++j) {
      const double pv = f == Family::gaussian ? detail::ks_pvalue(xs[j], gauss_cdf)
                                              : detail::ks_pvalue(xs[j], laplace_cdf);
      r.worst = std::min(r.worst, pv);
      ++r.cases;
    }
  }
  const auto lp = detail::random_params(Family::laplace, Sharing::independent, rng);
  std::array<double, kBoxDims> sum{}, sum_sq{};
  for (std::size_t i = 0; i < opt.variance_samples; ++i) {
    const BoxAction b = sample(lp, rng).action;
    for (std::size_t j = 0; j < kBoxDims; ++j) {
      const double d = b[j] - lp.mu[j];
      sum[j] += d;
      sum_sq[j] += d * d;
    }
  }
  double worst_var = 0.0;
  const double n = static_cast<double>(opt.variance_samples);
  for (std::size_t j = 0; j < kBoxDims; ++j) {
    const double m = sum[j] / n;
    const double var = (sum_sq[j] - n * m * m) / (n - 1.0);
    worst_var = std::max(worst_var, std::abs(var / (2.0 * lp.scale[j] * lp.scale[j]) - 1.0));
    ++r.cases;
  }
  r.passed = r.worst >= opt.ks_alpha && worst_var <= opt.variance_band;
  std::ostringstream d;
  d.precision(4);
  d << "laplace variance max rel dev " << worst_var << " (band " << opt.variance_band << ")";
  r.detail = d.str();
  return r;
}

namespace detail {

/// Small environment and network sized for finite-difference checks.
struct GradFixture {
  EnvConfig env;
  PolicyConfig policy;
};

inline GradFixture grad_fixture(Family f, Sharing s, CoordMode mode) {
  GradFixture fx;
  fx.env.grid = 4;
  fx.env.attributes = 2;
  fx.env.query_kinds = 1;
  fx.env.target_min = 0.25;
  fx.env.target_max = 0.5;
  fx.env.area_cap = 0.25;
  fx.policy.family = f;
  fx.policy.sharing = s;
  fx.policy.coords = mode;
  fx.policy.hidden = 5;
  fx.policy.layers = 2;
  fx.policy.bins = 6;
  fx.policy.init_dispersion = 0.2;
  fx.policy = bind_policy_dims(fx.policy, fx.env);
  return fx;
}

inline void densify(std::vector<double>& ctx, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : ctx) v = u(rng);
}

/// Supervised batch whose contexts are replaced by dense random vectors.
inline std::vector<SftExample> dense_sft_batch(const GradFixture& fx, std::size_t n, Rng& rng, bool tokens_only) {
  auto batch = gen_sft_dataset(n, rng, fx.env);
  for (auto& ex : batch) {
    std::vector<double> shared(fx.policy.input_dim);
    densify(shared, rng);
    std::vector<SftPosition> kept;
    for (auto& p : ex.positions) {
      if (p.kind == PositionKind::coord) {
        if (tokens_only) continue;
        p.context = kept.back().context;
      } else {
        densify(p.context, rng);
        if (p.token == Vocabulary::zoom) p.context = shared;
      }
      kept.push_back(std::move(p));
    }
    ex.positions = std::move(kept);
  }
  return batch;
}

/// Randomly perturbed copy of a parameter set.
inline ParamSet perturbed(const ParamSet& p, Rng& rng, double amount) {
  ParamSet out = p;
  std::normal_distribution<double> n(0.0, amount);
  for (auto& [name, t] : out)
    for (auto& v : t.data()) v += n(rng);
  return out;
}

/// Keeps the dispersion head well above the clamp floor, where the density
/// ratio has curvature ~ 1/scale^2.
inline void settle_dispersion(ParamSet& p, Rng& rng) {
  std::uniform_real_distribution<double> bias(0.15, 0.3);
  std::normal_distribution<double> w(0.0, 0.01);
  for (auto& v : p["disp.bias"].data()) v = bias(rng);
  for (auto& v : p["disp.weight"].data()) v = w(rng);
}

inline GradCheckOptions suite_grad_options() {
  GradCheckOptions o;
  o.order = 4;
  o.step = 1e-4;
  o.magnitude_floor = 1e-6;
  return o;
}

struct GradCase {
  std::string name;
  GradCheckReport report;
};

inline void fold(SuiteReport& r, const GradCase& c, double tol) {
  ++r.cases;
  const bool ok = c.report.valid && c.report.max_rel_err <= tol && c.report.checked > 0;
  if (!ok) r.passed = false;
  if (!c.report.valid) r.worst = INFINITY;
  else r.worst = std::max(r.worst, c.report.max_rel_err);
  if (!ok) {
    std::ostringstream d;
    d.precision(6);
    d << c.name << " failed at " << c.report.worst_param << "[" << c.report.worst_index
      << "] analytic " << c.report.worst_analytic << " numeric " << c.report.worst_numeric;
    r.detail += (r.detail.empty() ? "" : "; ") + d.str();
  }
}

}  // namespace detail

/// Finite-difference checks of every training loss on a small network.
inline SuiteReport suite_gradcheck_all(const VerifyOptions& opt = {}) {
  SuiteReport r{"gradcheck_all", true, 0, 0.0, opt.grad_tol, {}};
  Rng rng = make_rng(opt.seed, {0x9c4});
  std::size_t checked = 0, skipped = 0;
  auto fold = [&](const detail::GradCase& c, double tol) {
    checked += c.report.checked;
    skipped += c.report.skipped;
    detail::fold(r, c, tol);
  };

  auto sft_case = [&](const std::string& name, CoordMode mode, CoordLoss loss, bool tokens_only) {
    const auto fx = detail::grad_fixture(Family::laplace, Sharing::shared, mode);
    const ParamSet p = detail::perturbed(init_policy_params(fx.policy, rng), rng, 0.3);
    auto batch = detail::dense_sft_batch(fx, 3, rng, tokens_only);
    if (loss == CoordLoss::l1) {
      // Targets sit at least 0.02 from the current location, away from the |.| kink.
      std::uniform_real_distribution<double> off(0.02, 0.2);
      std::bernoulli_distribution neg(0.5);
      for (auto& ex : batch)
        for (auto& pos : ex.positions) {
          if (pos.kind != PositionKind::coord) continue;
          const std::vector<std::vector<double>> ctx{pos.context};
          const auto out = evaluate_policy(p, fx.policy, ctx);
          for (std::size_t j = 0; j < kBoxDims; ++j)
            pos.target_box[j] = out[0].coord.mu[j] + (neg(rng) ? -1.0 : 1.0) * off(rng);
        }
    }
    SftLossConfig lc;
    lc.coord_loss = loss;
    const LossBuilder fn = [&](ad::Graph& g, const BoundParams& b) {
      return sft_loss(g, b, batch, fx.policy, lc);
    };
    fold({name, grad_check(fn, p, detail::suite_grad_options())}, opt.grad_tol);
  };
  sft_case("sft_l2sq", CoordMode::continuous, CoordLoss::l2sq, false);
  sft_case("sft_l1", CoordMode::continuous, CoordLoss::l1, false);
  sft_case("ce_tokens", CoordMode::continuous, CoordLoss::l2sq, true);
  sft_case("ce_quantized", CoordMode::quantized, CoordLoss::l2sq, false);

  auto grpo_case = [&](const std::string& name, Family f, Sharing s, CoordMode mode, double beta) {
    const auto fx = detail::grad_fixture(f, s, mode);
    ParamSet old = detail::perturbed(init_policy_params(fx.policy, rng), rng, 0.3);
    detail::settle_dispersion(old, rng);
    std::vector<GroupRollout> groups;
    RolloutConfig rc;
    rc.group_size = 4;
    for (std::uint64_t t = 0; t < 3; ++t) {
      Rng trng = make_rng(opt.seed, {0x9c5, t});
      groups.push_back(rollout_group(new_task(trng, fx.env, t), old, fx.policy, fx.env, rc, opt.seed));
    }
    std::normal_distribution<double> adv(0.0, 1.0);
    for (auto& g : groups)
      for (auto& a : g.advantages) a = adv(rng);
    const SurrogateConfig sc{0.2, beta};
    const ParamSet ref = detail::perturbed(old, rng, 0.05);
    // Current parameters near the old ones, with every ratio clear of the clip edges.
    ParamSet cur = old;
    for (int attempt = 0; attempt < 50; ++attempt) {
      cur = detail::perturbed(old, rng, 0.01);
      ad::Graph g;
      BoundParams b(g, cur, false);
      const auto parts = surrogate_parts(g, b, groups, fx.policy, sc, &ref);
      bool clear = true;
      for (const auto& st : parts.steps) {
        const double ratio = std::exp(st.log_ratio);
        clear = clear && std::abs(ratio - (1.0 - sc.clip_eps)) > 1e-3 &&
                std::abs(ratio - (1.0 + sc.clip_eps)) > 1e-3;
      }
      if (clear) break;
    }
    const LossBuilder fn = [&](ad::Graph& g, const BoundParams& b) {
      return surrogate_loss(g, b, groups, fx.policy, sc, &ref);
    };
    fold({name, grad_check(fn, cur, detail::suite_grad_options())}, opt.grad_tol);
  };
  for (const auto& [f, s] : detail::kVariants)
    grpo_case("grpo_" + to_string(f) + "_" + to_string(s), f, s, CoordMode::continuous, 0.0);
  grpo_case("grpo_quantized", Family::laplace, Sharing::shared, CoordMode::quantized, 0.0);
  grpo_case("grpo_kl", Family::gaussian, Sharing::independent, CoordMode::continuous, 0.1);
  grpo_case("grpo_kl_quantized", Family::laplace, Sharing::shared, CoordMode::quantized, 0.1);
  const std::string counts =
      std::to_string(checked) + " components checked, " + std::to_string(skipped) + " below magnitude floor";
  r.detail = r.detail.empty() ? counts : r.detail + "; " + counts;
  return r;
}

inline std::vector<SuiteReport> run_all_suites(const VerifyOptions& opt = {}) {
  return {suite_ratio_consistency(opt), suite_kl_montecarlo(opt), suite_sampler_distribution(opt),
          suite_gradcheck_all(opt)};
}

}  // namespace coordrl
