#pragma once

// Continuous coordinate policies over a box b = [x1, y1, x2, y2].
//
// Two families (Gaussian, Laplace) and two dispersion layouts (one scale
// shared by the four coordinates, or one scale per coordinate). Densities and
// likelihood ratios are evaluated in log space; ratio() exponentiates last so
// extreme scale ratios do not underflow the prefactor on its own.

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

#include "coordrl/rng.hpp"

namespace coordrl {

inline constexpr std::size_t kBoxDims = 4;

enum class Family { gaussian, laplace };
enum class Sharing { shared, independent };

inline std::string to_string(Family f) { return f == Family::gaussian ? "gaussian" : "laplace"; }
inline std::string to_string(Sharing s) { return s == Sharing::shared ? "shared" : "independent"; }

/// Raw continuous action in normalized image coordinates. No ordering or
/// range constraint; the environment canonicalizes before cropping.
struct BoxAction {
  std::array<double, kBoxDims> c{};

  double& operator[](std::size_t i) { return c[i]; }
  double operator[](std::size_t i) const { return c[i]; }
  bool all_finite() const {
    for (double v : c)
      if (!std::isfinite(v)) return false;
    return true;
  }
  friend bool operator==(const BoxAction&, const BoxAction&) = default;
};

struct PolicyMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Location and dispersion of one coordinate distribution. For shared
/// dispersion the four entries of `scale` are equal and scale[0] is used.
struct CoordPolicyParams {
  Family family = Family::gaussian;
  Sharing sharing = Sharing::shared;
  std::array<double, kBoxDims> mu{};
  std::array<double, kBoxDims> scale{1.0, 1.0, 1.0, 1.0};

  static CoordPolicyParams make_shared(Family f, std::array<double, kBoxDims> mu, double s) {
    return {f, Sharing::shared, mu, {s, s, s, s}};
  }
  static CoordPolicyParams make_independent(Family f, std::array<double, kBoxDims> mu,
                                            std::array<double, kBoxDims> s) {
    return {f, Sharing::independent, mu, s};
  }

  double shared_scale() const { return scale[0]; }

  double mean_dispersion() const {
    return sharing == Sharing::shared ? scale[0]
                                      : 0.25 * (scale[0] + scale[1] + scale[2] + scale[3]);
  }

  friend bool operator==(const CoordPolicyParams&, const CoordPolicyParams&) = default;
};

namespace detail {

inline void require_compatible(const CoordPolicyParams& a, const CoordPolicyParams& b) {
  if (a.family != b.family || a.sharing != b.sharing)
    throw PolicyMismatch("coordinate policies differ in family or sharing: " +
                         to_string(a.family) + "/" + to_string(a.sharing) + " vs " +
                         to_string(b.family) + "/" + to_string(b.sharing));
}

inline double sq_dist(const BoxAction& b, const std::array<double, kBoxDims>& mu) {
  double s = 0.0;
  for (std::size_t j = 0; j < kBoxDims; ++j) s += (b[j] - mu[j]) * (b[j] - mu[j]);
  return s;
}

inline double l1_dist(const BoxAction& b, const std::array<double, kBoxDims>& mu) {
  double s = 0.0;
  for (std::size_t j = 0; j < kBoxDims; ++j) s += std::abs(b[j] - mu[j]);
  return s;
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

/// log p(b | mu, scale).
inline double log_density(const BoxAction& b, const CoordPolicyParams& p) {
  constexpr double log_2pi = 1.8378770664093454836;  // log(2*pi)
  constexpr double log_2 = std::numbers::ln2;
  if (p.family == Family::gaussian) {
    if (p.sharing == Sharing::shared) {
      const double s = p.shared_scale();
      return -2.0 * log_2pi - 4.0 * std::log(s) - detail::sq_dist(b, p.mu) / (2.0 * s * s);
    }
    double acc = 0.0;
    for (std::size_t j = 0; j < kBoxDims; ++j) {
      const double d = b[j] - p.mu[j], s = p.scale[j];
      acc += -0.5 * log_2pi - std::log(s) - d * d / (2.0 * s * s);
    }
    return acc;
  }
  if (p.sharing == Sharing::shared) {
    const double a = p.shared_scale();
    return -4.0 * (log_2 + std::log(a)) - detail::l1_dist(b, p.mu) / a;
  }
  double acc = 0.0;
  for (std::size_t j = 0; j < kBoxDims; ++j)
    acc += -(log_2 + std::log(p.scale[j])) - std::abs(b[j] - p.mu[j]) / p.scale[j];
  return acc;
}

/// Closed-form log of pi_new(b) / pi_old(b); the normalizing constants cancel
/// analytically, leaving the scale prefactor and the two distance terms.
inline double log_importance_ratio(const BoxAction& b, const CoordPolicyParams& next,
                                   const CoordPolicyParams& old) {
  detail::require_compatible(next, old);
  if (next.family == Family::gaussian) {
    if (next.sharing == Sharing::shared) {
      const double sn = next.shared_scale(), so = old.shared_scale();
      return 4.0 * (std::log(so) - std::log(sn)) - detail::sq_dist(b, next.mu) / (2.0 * sn * sn) +
             detail::sq_dist(b, old.mu) / (2.0 * so * so);
    }
    double acc = 0.0;
    for (std::size_t j = 0; j < kBoxDims; ++j) {
      const double sn = next.scale[j], so = old.scale[j];
      const double dn = b[j] - next.mu[j], d_old = b[j] - old.mu[j];
      acc += (std::log(so) - std::log(sn)) - dn * dn / (2.0 * sn * sn) +
             d_old * d_old / (2.0 * so * so);
    }
    return acc;
  }
  if (next.sharing == Sharing::shared) {
    const double an = next.shared_scale(), ao = old.shared_scale();
    return 4.0 * (std::log(ao) - std::log(an)) - detail::l1_dist(b, next.mu) / an +
           detail::l1_dist(b, old.mu) / ao;
  }
  double acc = 0.0;
  for (std::size_t j = 0; j < kBoxDims; ++j) {
    const double an = next.scale[j], ao = old.scale[j];
    acc += (std::log(ao) - std::log(an)) - std::abs(b[j] - next.mu[j]) / an +
           std::abs(b[j] - old.mu[j]) / ao;
  }
  return acc;
}

inline double importance_ratio(const BoxAction& b, const CoordPolicyParams& next,
                               const CoordPolicyParams& old) {
  return std::exp(log_importance_ratio(b, next, old));
}

/// Partial derivatives of log_importance_ratio with respect to the new
/// policy's location and scale. For shared dispersion only d_scale[0] is set.
/// Laplace location derivatives use 0 at ties.
struct LogRatioGradient {
  std::array<double, kBoxDims> d_mu{};
  std::array<double, kBoxDims> d_scale{};
};

inline LogRatioGradient log_ratio_gradient(const BoxAction& b, const CoordPolicyParams& next) {
  LogRatioGradient g;
  if (next.family == Family::gaussian) {
    if (next.sharing == Sharing::shared) {
      const double s = next.shared_scale();
      for (std::size_t j = 0; j < kBoxDims; ++j) g.d_mu[j] = (b[j] - next.mu[j]) / (s * s);
      g.d_scale[0] = -4.0 / s + detail::sq_dist(b, next.mu) / (s * s * s);
    } else {
      for (std::size_t j = 0; j < kBoxDims; ++j) {
        const double s = next.scale[j], d = b[j] - next.mu[j];
        g.d_mu[j] = d / (s * s);
        g.d_scale[j] = -1.0 / s + d * d / (s * s * s);
      }
    }
    return g;
  }
  if (next.sharing == Sharing::shared) {
    const double a = next.shared_scale();
    for (std::size_t j = 0; j < kBoxDims; ++j) g.d_mu[j] = detail::sign(b[j] - next.mu[j]) / a;
    g.d_scale[0] = -4.0 / a + detail::l1_dist(b, next.mu) / (a * a);
  } else {
    for (std::size_t j = 0; j < kBoxDims; ++j) {
      const double a = next.scale[j], d = b[j] - next.mu[j];
      g.d_mu[j] = detail::sign(d) / a;
      g.d_scale[j] = -1.0 / a + std::abs(d) / (a * a);
    }
  }
  return g;
}

/// Squared Euclidean distance between locations; the trainable KL surrogate
/// when the reference dispersion is unknown.
inline double kl_mean_only(const std::array<double, kBoxDims>& mu_new,
                           const std::array<double, kBoxDims>& mu_ref) {
  double s = 0.0;
  for (std::size_t j = 0; j < kBoxDims; ++j) s += (mu_new[j] - mu_ref[j]) * (mu_new[j] - mu_ref[j]);
  return s;
}

/// Full KL(p1 || p2) between diagonal Gaussians, including the variance terms.
inline double kl_gaussian_full(const CoordPolicyParams& p1, const CoordPolicyParams& p2) {
  if (p1.family != Family::gaussian || p2.family != Family::gaussian)
    throw PolicyMismatch("kl_gaussian_full requires two Gaussian policies");
  detail::require_compatible(p1, p2);
  if (p1.sharing == Sharing::shared) {
    const double v1 = p1.shared_scale() * p1.shared_scale();
    const double v2 = p2.shared_scale() * p2.shared_scale();
    const double q = v1 / v2;
    return 0.5 * static_cast<double>(kBoxDims) * (q - 1.0 - std::log(q)) +
           kl_mean_only(p1.mu, p2.mu) / (2.0 * v2);
  }
  double acc = 0.0;
  for (std::size_t j = 0; j < kBoxDims; ++j) {
    const double v1 = p1.scale[j] * p1.scale[j], v2 = p2.scale[j] * p2.scale[j];
    const double q = v1 / v2;
    const double d = p1.mu[j] - p2.mu[j];
    acc += 0.5 * (q - 1.0 - std::log(q)) + d * d / (2.0 * v2);
  }
  return acc;
}

/// Parameter-free noise behind one reparameterized sample.
/// Gaussian: b = mu + scale * normal.  Laplace: b = mu + scale * sign * exponential.
struct NoiseRecord {
  Family family = Family::gaussian;
  std::array<double, kBoxDims> normal{};
  std::array<double, kBoxDims> sign{1.0, 1.0, 1.0, 1.0};
  std::array<double, kBoxDims> exponential{};

  friend bool operator==(const NoiseRecord&, const NoiseRecord&) = default;
};

struct CoordSample {
  BoxAction action;
  NoiseRecord noise;
};

inline NoiseRecord draw_noise(Family family, Rng& rng) {
  NoiseRecord n;
  n.family = family;
  if (family == Family::gaussian) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& e : n.normal) e = normal(rng);
  } else {
    std::exponential_distribution<double> expo(1.0);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t j = 0; j < kBoxDims; ++j) {
      n.sign[j] = coin(rng) ? 1.0 : -1.0;
      n.exponential[j] = expo(rng);
    }
  }
  return n;
}

/// Deterministic transform of parameters and noise.
inline BoxAction apply_noise(const CoordPolicyParams& p, const NoiseRecord& n) {
  if (n.family != p.family) throw PolicyMismatch("noise record family does not match policy");
  BoxAction b;
  for (std::size_t j = 0; j < kBoxDims; ++j) {
    const double s = p.sharing == Sharing::shared ? p.shared_scale() : p.scale[j];
    b[j] = p.family == Family::gaussian ? p.mu[j] + s * n.normal[j]
                                        : p.mu[j] + s * (n.sign[j] * n.exponential[j]);
  }
  return b;
}

inline CoordSample sample(const CoordPolicyParams& p, Rng& rng) {
  CoordSample s;
  s.noise = draw_noise(p.family, rng);
  s.action = apply_noise(p, s.noise);
  return s;
}

/// Inference-time action: the location, with no sampling.
inline BoxAction deterministic_action(const CoordPolicyParams& p) { return BoxAction{p.mu}; }

}  // namespace coordrl
