#pragma once

// Policy network: a tanh MLP trunk producing the hidden state h, followed by
// heads that all read the same h:
//   vocab   [V x D]  categorical logits over the token vocabulary
//   coord   [4 x D]  coordinate location mu
//   disp    [k x D]  dispersion, k = 1 (shared) or 4 (independent), clamped
//                    below at epsilon_floor
//   qcoord  [4B x D] per-coordinate bin logits (quantized baseline only)

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "coordrl/diffcore/graph.hpp"
#include "coordrl/diffcore/params.hpp"
#include "coordrl/policy/coord_policy.hpp"
#include "coordrl/policy/vocab.hpp"
#include "coordrl/rng.hpp"

namespace coordrl {

enum class CoordMode { continuous, quantized };

inline std::string to_string(CoordMode m) {
  return m == CoordMode::continuous ? "continuous" : "quantized";
}

struct PolicyConfig {
  Family family = Family::laplace;
  Sharing sharing = Sharing::shared;
  CoordMode coords = CoordMode::continuous;
  std::size_t input_dim = 0;
  std::size_t vocab_size = 0;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  double epsilon_floor = 1e-3;
  double init_dispersion = 0.02;
  std::size_t bins = 100;
  /// Initial coordinate-head bias: a centered box covering a quarter of the image.
  std::array<double, kBoxDims> init_box{0.25, 0.25, 0.75, 0.75};

  std::size_t dispersion_rows() const { return sharing == Sharing::shared ? 1 : kBoxDims; }
};

namespace detail {

inline Tensor glorot(std::size_t out, std::size_t in, Rng& rng, double gain = 1.0) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor t(Shape{out, in});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace detail

inline std::string trunk_weight(std::size_t layer) { return "trunk." + std::to_string(layer) + ".weight"; }
inline std::string trunk_bias(std::size_t layer) { return "trunk." + std::to_string(layer) + ".bias"; }

inline ParamSet init_policy_params(const PolicyConfig& cfg, Rng& rng) {
  if (cfg.input_dim == 0 || cfg.vocab_size == 0 || cfg.hidden == 0)
    throw std::invalid_argument("policy config needs input_dim, vocab_size and hidden > 0");
  ParamSet p;
  std::size_t in = cfg.input_dim;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    p.add(trunk_weight(l), detail::glorot(cfg.hidden, in, rng));
    p.add(trunk_bias(l), Tensor(Shape{cfg.hidden}));
    in = cfg.hidden;
  }
  p.add("vocab.weight", detail::glorot(cfg.vocab_size, cfg.hidden, rng));
  p.add("vocab.bias", Tensor(Shape{cfg.vocab_size}));
  p.add("coord.weight", detail::glorot(kBoxDims, cfg.hidden, rng, 0.1));
  p.add("coord.bias", Tensor::vector({cfg.init_box.begin(), cfg.init_box.end()}));
  const std::size_t k = cfg.dispersion_rows();
  p.add("disp.weight", Tensor(Shape{k, cfg.hidden}));
  p.add("disp.bias", Tensor(Shape{k}, cfg.init_dispersion));
  if (cfg.coords == CoordMode::quantized) {
    if (cfg.bins < 2) throw std::invalid_argument("quantized coordinates need at least 2 bins");
    p.add("qcoord.weight", detail::glorot(kBoxDims * cfg.bins, cfg.hidden, rng));
    p.add("qcoord.bias", Tensor(Shape{kBoxDims * cfg.bins}));
  }
  return p;
}

/// Graph nodes for a batch of n decoding steps.
struct HeadVars {
  ad::Var hidden;      // [n x D]
  ad::Var vocab_logp;  // [n x V]
  ad::Var mu;          // [n x 4]
  ad::Var dispersion;  // [n x k], already clamped
  std::optional<ad::Var> bin_logp;  // [4n x B]; row 4i+j is coordinate j of step i
};

inline ad::Var trunk(ad::Var x, const BoundParams& p, const PolicyConfig& cfg) {
  for (std::size_t l = 0; l < cfg.layers; ++l)
    x = ad::tanh(ad::linear(x, p[trunk_weight(l)], p[trunk_bias(l)]));
  return x;
}

/// Heads applied to hidden states h ([n x D]).
inline HeadVars decode_heads(ad::Var h, const BoundParams& p, const PolicyConfig& cfg) {
  HeadVars out;
  out.hidden = h;
  out.vocab_logp = ad::log_softmax(ad::linear(h, p["vocab.weight"], p["vocab.bias"]));
  out.mu = ad::linear(h, p["coord.weight"], p["coord.bias"]);
  out.dispersion = ad::clamp_min(ad::linear(h, p["disp.weight"], p["disp.bias"]), cfg.epsilon_floor);
  if (cfg.coords == CoordMode::quantized) {
    const std::size_t n = h.value().rows();
    auto logits = ad::linear(h, p["qcoord.weight"], p["qcoord.bias"]);
    out.bin_logp = ad::log_softmax(ad::reshape(logits, Shape{n * kBoxDims, cfg.bins}));
  }
  return out;
}

/// Full forward pass on a batch of contexts ([n x input_dim]).
inline HeadVars forward(ad::Var contexts, const BoundParams& p, const PolicyConfig& cfg) {
  return decode_heads(trunk(contexts, p, cfg), p, cfg);
}

inline Tensor stack_rows(std::span<const std::vector<double>> rows, std::size_t dim) {
  Tensor t(Shape{rows.size(), dim});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != dim) throw ShapeError("context length mismatch");
    std::copy(rows[r].begin(), rows[r].end(), t.data().begin() + static_cast<long>(r * dim));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Plain-value policy outputs

struct VocabDist {
  std::vector<double> log_probs;

  std::size_t argmax() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < log_probs.size(); ++i)
      if (log_probs[i] > log_probs[best]) best = i;
    return best;
  }
};

/// Four independent categoricals over uniform bins of [0, 1].
struct QuantizedCoordPolicy {
  std::size_t bins = 2;
  std::array<std::vector<double>, kBoxDims> log_probs;
};

struct PolicyOutput {
  VocabDist vocab;
  CoordPolicyParams coord;
  std::optional<QuantizedCoordPolicy> quantized;
};

/// Reads row `r` of evaluated heads into plain values.
inline PolicyOutput read_output(const HeadVars& heads, std::size_t r, const PolicyConfig& cfg) {
  PolicyOutput out;
  const Tensor& lp = heads.vocab_logp.value();
  out.vocab.log_probs.assign(lp.data().begin() + static_cast<long>(r * lp.cols()),
                             lp.data().begin() + static_cast<long>((r + 1) * lp.cols()));
  out.coord.family = cfg.family;
  out.coord.sharing = cfg.sharing;
  const Tensor& mu = heads.mu.value();
  const Tensor& disp = heads.dispersion.value();
  for (std::size_t j = 0; j < kBoxDims; ++j) {
    out.coord.mu[j] = mu.at(r, j);
    out.coord.scale[j] = cfg.sharing == Sharing::shared ? disp.at(r, 0) : disp.at(r, j);
  }
  if (heads.bin_logp) {
    QuantizedCoordPolicy q;
    q.bins = cfg.bins;
    const Tensor& bl = heads.bin_logp->value();
    for (std::size_t j = 0; j < kBoxDims; ++j) {
      const std::size_t row = r * kBoxDims + j;
      q.log_probs[j].assign(bl.data().begin() + static_cast<long>(row * cfg.bins),
                            bl.data().begin() + static_cast<long>((row + 1) * cfg.bins));
    }
    out.quantized = std::move(q);
  }
  return out;
}

/// Inference on a batch of contexts without recording gradients.
inline std::vector<PolicyOutput> evaluate_policy(const ParamSet& params, const PolicyConfig& cfg,
                                                 std::span<const std::vector<double>> contexts) {
  if (contexts.empty()) return {};
  ad::Graph g;
  BoundParams bound(g, params, /*trainable=*/false);
  const auto heads = forward(g.constant(stack_rows(contexts, cfg.input_dim)), bound, cfg);
  std::vector<PolicyOutput> out;
  out.reserve(contexts.size());
  for (std::size_t r = 0; r < contexts.size(); ++r) out.push_back(read_output(heads, r, cfg));
  return out;
}

/// Heads only, on one hidden state h ([D]).
inline PolicyOutput decode_heads(const Tensor& h, const ParamSet& params, const PolicyConfig& cfg) {
  ad::Graph g;
  BoundParams bound(g, params, /*trainable=*/false);
  const auto row = Tensor(Shape{1, h.size()}, h.values());
  return read_output(decode_heads(g.constant(row), bound, cfg), 0, cfg);
}

// ---------------------------------------------------------------------------
// Sampling helpers

inline std::size_t sample_categorical(std::span<const double> log_probs, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double target = u(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < log_probs.size(); ++i) {
    acc += std::exp(log_probs[i]);
    if (target < acc) return i;
  }
  // Rounding left a sliver of mass; return the last bin with nonzero probability.
  for (std::size_t i = log_probs.size(); i-- > 0;)
    if (std::exp(log_probs[i]) > 0.0) return i;
  return log_probs.size() - 1;
}

inline double bin_center(std::size_t bin, std::size_t bins) {
  return (static_cast<double>(bin) + 0.5) / static_cast<double>(bins);
}

inline std::size_t bin_index(double x, std::size_t bins) {
  const double scaled = std::floor(x * static_cast<double>(bins));
  if (!(scaled > 0.0)) return 0;
  return std::min(static_cast<std::size_t>(scaled), bins - 1);
}

struct QuantizedSample {
  std::array<std::size_t, kBoxDims> bins{};
  BoxAction decoded;
};

inline QuantizedSample quantized_sample(const QuantizedCoordPolicy& q, Rng& rng) {
  QuantizedSample s;
  for (std::size_t j = 0; j < kBoxDims; ++j) {
    s.bins[j] = sample_categorical(q.log_probs[j], rng);
    s.decoded[j] = bin_center(s.bins[j], q.bins);
  }
  return s;
}

inline QuantizedSample quantized_argmax(const QuantizedCoordPolicy& q) {
  QuantizedSample s;
  for (std::size_t j = 0; j < kBoxDims; ++j) {
    s.bins[j] = VocabDist{q.log_probs[j]}.argmax();
    s.decoded[j] = bin_center(s.bins[j], q.bins);
  }
  return s;
}

inline double quantized_log_prob(const QuantizedCoordPolicy& q,
                                 const std::array<std::size_t, kBoxDims>& bins) {
  double acc = 0.0;
  for (std::size_t j = 0; j < kBoxDims; ++j) acc += q.log_probs[j][bins[j]];
  return acc;
}

// ---------------------------------------------------------------------------
// Graph op: closed-form coordinate log-ratio

/// Row-wise log pi_new(b_i) / pi_old(b_i) where pi_new is read from the graph
/// nodes mu [n x 4] and dispersion [n x k]. The forward value is computed by
/// log_importance_ratio itself, so ratios inside a loss agree exactly with the
/// standalone function.
/// Throws PolicyMismatch when `family` or the dispersion layout differs from
/// the rollout-time parameters.
inline ad::Var coord_log_ratio(Family family, ad::Var mu, ad::Var dispersion,
                               std::span<const BoxAction> actions,
                               std::span<const CoordPolicyParams> old) {
  const std::size_t n = actions.size();
  if (old.size() != n || mu.value().rows() != n || dispersion.value().rows() != n ||
      mu.value().cols() != kBoxDims)
    throw ShapeError("coord_log_ratio: batch size mismatch");
  const std::size_t k = dispersion.value().cols();
  std::vector<CoordPolicyParams> next(n);
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const Sharing sharing = k == 1 ? Sharing::shared : Sharing::independent;
    next[i].family = family;
    next[i].sharing = sharing;
    for (std::size_t j = 0; j < kBoxDims; ++j) {
      next[i].mu[j] = mu.value().at(i, j);
      next[i].scale[j] = dispersion.value().at(i, k == 1 ? 0 : j);
    }
    out[i] = log_importance_ratio(actions[i], next[i], old[i]);
  }
  std::vector<BoxAction> acts(actions.begin(), actions.end());
  const std::size_t mi = mu.id, di = dispersion.id;
  return mu.graph->record(std::move(out), {mu, dispersion},
                          [mi, di, k, acts = std::move(acts), next = std::move(next)](
                              ad::Graph& g, const Tensor& dout) {
                            Tensor* gm = g.grad_buffer(mi);
                            Tensor* gd = g.grad_buffer(di);
                            for (std::size_t i = 0; i < acts.size(); ++i) {
                              if (dout[i] == 0.0) continue;
                              const auto lg = log_ratio_gradient(acts[i], next[i]);
                              if (gm)
                                for (std::size_t j = 0; j < kBoxDims; ++j)
                                  gm->at(i, j) += dout[i] * lg.d_mu[j];
                              if (gd)
                                for (std::size_t j = 0; j < k; ++j)
                                  gd->at(i, j) += dout[i] * lg.d_scale[j];
                            }
                          });
}

}  // namespace coordrl
