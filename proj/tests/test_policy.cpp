#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "coordrl/diffcore/graph.hpp"
#include "coordrl/env/env.hpp"
#include "coordrl/policy/coord_policy.hpp"
#include "coordrl/policy/network.hpp"
#include "coordrl/rng.hpp"

using namespace coordrl;

namespace {

constexpr std::array<double, 4> kZero{0, 0, 0, 0};

PolicyConfig small_policy(Family f, Sharing s, CoordMode m = CoordMode::continuous) {
  PolicyConfig c;
  c.family = f;
  c.sharing = s;
  c.coords = m;
  c.input_dim = 6;
  c.vocab_size = 6;
  c.hidden = 8;
  c.bins = 5;
  return c;
}

}  // namespace

TEST(LogDensity, GaussianAtMean) {
  const auto p = CoordPolicyParams::make_shared(Family::gaussian, kZero, 1.0);
  EXPECT_NEAR(log_density(BoxAction{kZero}, p), -2.0 * std::log(2.0 * std::numbers::pi), 1e-12);
  EXPECT_NEAR(log_density(BoxAction{kZero}, p), -3.675754, 1e-6);
}

TEST(LogDensity, LaplaceAtLocation) {
  const auto p = CoordPolicyParams::make_shared(Family::laplace, kZero, 1.0);
  EXPECT_NEAR(log_density(BoxAction{kZero}, p), -2.772589, 1e-6);
}

TEST(LogDensity, GaussianUnitDisplacement) {
  const auto p = CoordPolicyParams::make_shared(Family::gaussian, kZero, 1.0);
  EXPECT_NEAR(log_density(BoxAction{{1, 0, 0, 0}}, p), -4.175754, 1e-6);
}

TEST(LogDensity, IndependentWithEqualScalesMatchesShared) {
  const std::array<double, 4> mu{0.1, 0.2, 0.6, 0.7};
  const BoxAction b{{0.15, 0.1, 0.5, 0.9}};
  for (Family f : {Family::gaussian, Family::laplace}) {
    const auto s = CoordPolicyParams::make_shared(f, mu, 0.3);
    const auto i = CoordPolicyParams::make_independent(f, mu, {0.3, 0.3, 0.3, 0.3});
    EXPECT_NEAR(log_density(b, s), log_density(b, i), 1e-12);
  }
}

TEST(ImportanceRatio, EqualParamsGiveExactlyOne) {
  Rng rng = make_rng(1);
  std::normal_distribution<double> n(0.5, 0.3);
  for (Family f : {Family::gaussian, Family::laplace})
    for (Sharing s : {Sharing::shared, Sharing::independent}) {
      CoordPolicyParams p{f, s, {0.2, 0.3, 0.6, 0.7}, {0.1, 0.2, 0.15, 0.05}};
      if (s == Sharing::shared) p.scale = {0.1, 0.1, 0.1, 0.1};
      for (int k = 0; k < 50; ++k) {
        const BoxAction b{{n(rng), n(rng), n(rng), n(rng)}};
        EXPECT_EQ(importance_ratio(b, p, p), 1.0);
        EXPECT_EQ(log_importance_ratio(b, p, p), 0.0);
      }
    }
}

TEST(ImportanceRatio, GaussianScalePrefactor) {
  const auto old = CoordPolicyParams::make_shared(Family::gaussian, kZero, 1.0);
  const auto next = CoordPolicyParams::make_shared(Family::gaussian, kZero, 2.0);
  const BoxAction b{kZero};
  EXPECT_NEAR(importance_ratio(b, next, old), 1.0 / 16.0, 1e-15);
  EXPECT_NEAR(importance_ratio(b, next, old), std::exp(log_density(b, next) - log_density(b, old)), 1e-14);
}

TEST(ImportanceRatio, LaplaceScalePrefactor) {
  const auto old = CoordPolicyParams::make_shared(Family::laplace, kZero, 1.0);
  const auto next = CoordPolicyParams::make_shared(Family::laplace, kZero, 2.0);
  EXPECT_NEAR(importance_ratio(BoxAction{kZero}, next, old), 1.0 / 16.0, 1e-15);
}

TEST(ImportanceRatio, MatchesDensityDifference) {
  Rng rng = make_rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0), sc(0.05, 0.5);
  for (Family f : {Family::gaussian, Family::laplace})
    for (Sharing s : {Sharing::shared, Sharing::independent})
      for (int k = 0; k < 200; ++k) {
        auto mk = [&] {
          CoordPolicyParams p{f, s, {u(rng), u(rng), u(rng), u(rng)}, {}};
          const double a = sc(rng);
          for (auto& v : p.scale) v = s == Sharing::shared ? a : sc(rng);
          return p;
        };
        const auto a = mk(), o = mk();
        const BoxAction b{{u(rng), u(rng), u(rng), u(rng)}};
        const double r = importance_ratio(b, a, o);
        EXPECT_NEAR(r, std::exp(log_density(b, a) - log_density(b, o)), 1e-10 * r);
      }
}

TEST(ImportanceRatio, MismatchThrows) {
  const auto g = CoordPolicyParams::make_shared(Family::gaussian, kZero, 1.0);
  const auto l = CoordPolicyParams::make_shared(Family::laplace, kZero, 1.0);
  const auto gi = CoordPolicyParams::make_independent(Family::gaussian, kZero, {1, 1, 1, 1});
  EXPECT_THROW(importance_ratio(BoxAction{}, g, l), PolicyMismatch);
  EXPECT_THROW(importance_ratio(BoxAction{}, g, gi), PolicyMismatch);
}

TEST(Kl, MeanOnly) {
  EXPECT_EQ(kl_mean_only(kZero, kZero), 0.0);
  EXPECT_EQ(kl_mean_only({1, 1, 1, 1}, kZero), 4.0);
  const std::array<double, 4> d{0.3, -0.1, 0.2, 0.5};
  const std::array<double, 4> d3{0.9, -0.3, 0.6, 1.5};
  EXPECT_NEAR(kl_mean_only(d3, kZero), 9.0 * kl_mean_only(d, kZero), 1e-12);
}

TEST(Kl, GaussianFull) {
  const auto p = CoordPolicyParams::make_shared(Family::gaussian, kZero, 1.0);
  EXPECT_EQ(kl_gaussian_full(p, p), 0.0);
  const auto q = CoordPolicyParams::make_shared(Family::gaussian, {1, 0, 0, 0}, 1.0);
  EXPECT_NEAR(kl_gaussian_full(q, p), 0.5, 1e-15);
  const auto wide = CoordPolicyParams::make_shared(Family::gaussian, kZero, 1.7);
  EXPECT_GT(kl_gaussian_full(wide, p), 0.0);
  const auto lap = CoordPolicyParams::make_shared(Family::laplace, kZero, 1.0);
  EXPECT_THROW(kl_gaussian_full(lap, lap), PolicyMismatch);
}

TEST(Sampling, ZeroNoiseReturnsLocation) {
  const auto p = CoordPolicyParams::make_shared(Family::gaussian, {0.1, 0.2, 0.3, 0.4}, 0.5);
  NoiseRecord n;
  EXPECT_EQ(apply_noise(p, n), BoxAction{p.mu});
  auto lp = CoordPolicyParams::make_shared(Family::laplace, {0.1, 0.2, 0.3, 0.4}, 0.5);
  NoiseRecord nl;
  nl.family = Family::laplace;
  EXPECT_EQ(apply_noise(lp, nl), BoxAction{lp.mu});
}

TEST(Sampling, NoiseRecordReproducesAction) {
  Rng rng = make_rng(4);
  const auto p = CoordPolicyParams::make_independent(Family::laplace, {0.1, 0.2, 0.3, 0.4}, {0.1, 0.2, 0.3, 0.4});
  const auto s = sample(p, rng);
  EXPECT_EQ(apply_noise(p, s.noise), s.action);
}

TEST(Sampling, GaussianMoments) {
  Rng rng = make_rng(5);
  const auto p = CoordPolicyParams::make_shared(Family::gaussian, kZero, 1.0);
  const int N = 1'000'000;
  std::array<double, 4> m{}, m2{};
  for (int i = 0; i < N; ++i) {
    const auto b = sample(p, rng).action;
    for (int j = 0; j < 4; ++j) {
      m[j] += b[j];
      m2[j] += b[j] * b[j];
    }
  }
  for (int j = 0; j < 4; ++j) {
    const double mean = m[j] / N, var = m2[j] / N - mean * mean;
    EXPECT_LT(std::abs(mean), 4.0 / std::sqrt(N));
    EXPECT_GE(var, 0.99);
    EXPECT_LE(var, 1.01);
  }
}

TEST(Sampling, LaplaceVariance) {
  Rng rng = make_rng(6);
  const auto p = CoordPolicyParams::make_shared(Family::laplace, kZero, 1.0);
  const int N = 1'000'000;
  std::array<double, 4> m{}, m2{};
  for (int i = 0; i < N; ++i) {
    const auto b = sample(p, rng).action;
    for (int j = 0; j < 4; ++j) {
      m[j] += b[j];
      m2[j] += b[j] * b[j];
    }
  }
  for (int j = 0; j < 4; ++j) {
    const double mean = m[j] / N, var = m2[j] / N - mean * mean;
    EXPECT_GE(var, 1.97);
    EXPECT_LE(var, 2.03);
  }
}

TEST(DeterministicAction, IsTheLocation) {
  auto p = CoordPolicyParams::make_shared(Family::laplace, {0.1, 0.2, 0.3, 0.4}, 0.5);
  const auto a = deterministic_action(p);
  EXPECT_EQ(a, (BoxAction{{0.1, 0.2, 0.3, 0.4}}));
  p.scale = {9, 9, 9, 9};
  EXPECT_EQ(deterministic_action(p), a);
  EXPECT_EQ(deterministic_action(p), deterministic_action(p));
}

TEST(DecodeHeads, ClampsDispersion) {
  auto cfg = small_policy(Family::gaussian, Sharing::shared);
  Rng rng = make_rng(7);
  auto params = init_policy_params(cfg, rng);
  params["disp.bias"][0] = -5.0;
  const auto out = decode_heads(Tensor::vector(std::vector<double>(cfg.hidden, 0.3)), params, cfg);
  EXPECT_EQ(out.coord.scale[0], cfg.epsilon_floor);
}

TEST(DecodeHeads, ZeroCoordinateHeadGivesZeroMean) {
  auto cfg = small_policy(Family::laplace, Sharing::shared);
  Rng rng = make_rng(8);
  auto params = init_policy_params(cfg, rng);
  for (auto& v : params["coord.weight"].data()) v = 0.0;
  for (auto& v : params["coord.bias"].data()) v = 0.0;
  const auto out = decode_heads(Tensor::vector({0.3, -1, 2, 0.1, 0.5, 0.7, -0.2, 0.9}), params, cfg);
  EXPECT_EQ(out.coord.mu, kZero);
}

TEST(DecodeHeads, IdenticalIndependentRowsGiveEqualScales) {
  auto cfg = small_policy(Family::gaussian, Sharing::independent);
  Rng rng = make_rng(9);
  auto params = init_policy_params(cfg, rng);
  auto& w = params["disp.weight"];
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < cfg.hidden; ++c) w.data()[r * cfg.hidden + c] = 0.01 * static_cast<double>(c);
  const auto out = decode_heads(Tensor::vector(std::vector<double>(cfg.hidden, 0.5)), params, cfg);
  EXPECT_EQ(out.coord.scale[0], out.coord.scale[1]);
  EXPECT_EQ(out.coord.scale[0], out.coord.scale[3]);
  EXPECT_EQ(out.coord.sharing, Sharing::independent);
}

TEST(DecodeHeads, VocabularyNormalized) {
  auto cfg = small_policy(Family::gaussian, Sharing::shared);
  Rng rng = make_rng(10);
  const auto params = init_policy_params(cfg, rng);
  const std::vector<std::vector<double>> ctx{{1, 0, 0.5, -0.5, 0.2, 0.1}};
  const auto out = evaluate_policy(params, cfg, ctx);
  double s = 0.0;
  for (double lp : out[0].vocab.log_probs) s += std::exp(lp);
  EXPECT_NEAR(s, 1.0, 1e-10);
}

TEST(Quantized, BinCentersAndIndices) {
  EXPECT_DOUBLE_EQ(bin_center(0, 2), 0.25);
  EXPECT_DOUBLE_EQ(bin_center(1, 2), 0.75);
  EXPECT_DOUBLE_EQ(bin_center(37, 100), 0.375);
  EXPECT_EQ(bin_index(0.0, 100), 0u);
  EXPECT_EQ(bin_index(1.0, 100), 99u);
  EXPECT_EQ(bin_index(-0.5, 100), 0u);
  EXPECT_EQ(bin_index(0.375, 8), 3u);
}

TEST(Quantized, UniformTwoBinSampling) {
  QuantizedCoordPolicy q;
  q.bins = 2;
  for (auto& lp : q.log_probs) lp = {std::log(0.5), std::log(0.5)};
  Rng rng = make_rng(11);
  int high = 0;
  const int N = 20000;
  for (int i = 0; i < N; ++i) {
    const auto s = quantized_sample(q, rng);
    for (int j = 0; j < 4; ++j) {
      ASSERT_TRUE(s.decoded[j] == 0.25 || s.decoded[j] == 0.75);
      high += s.decoded[j] == 0.75;
    }
  }
  EXPECT_NEAR(static_cast<double>(high) / (4.0 * N), 0.5, 0.01);
  EXPECT_NEAR(quantized_log_prob(q, {0, 1, 0, 1}), 4.0 * std::log(0.5), 1e-12);
}

TEST(Quantized, HeadsAreNormalizedCategoricals) {
  auto cfg = small_policy(Family::gaussian, Sharing::shared, CoordMode::quantized);
  Rng rng = make_rng(12);
  const auto params = init_policy_params(cfg, rng);
  const std::vector<std::vector<double>> ctx{{1, 0, 0.5, -0.5, 0.2, 0.1}};
  const auto out = evaluate_policy(params, cfg, ctx);
  ASSERT_TRUE(out[0].quantized.has_value());
  for (const auto& lp : out[0].quantized->log_probs) {
    ASSERT_EQ(lp.size(), cfg.bins);
    double s = 0.0;
    for (double v : lp) s += std::exp(v);
    EXPECT_NEAR(s, 1.0, 1e-10);
  }
}

TEST(CoordLogRatio, MatchesStandaloneRatioExactly) {
  for (Family f : {Family::gaussian, Family::laplace})
    for (Sharing s : {Sharing::shared, Sharing::independent}) {
      auto cfg = small_policy(f, s);
      Rng rng = make_rng(13);
      const auto params = init_policy_params(cfg, rng);
      const std::vector<std::vector<double>> ctx{{1, 0, 0.5, -0.5, 0.2, 0.1}, {0, 1, -0.3, 0.4, 0.9, 0.0}};
      const auto outs = evaluate_policy(params, cfg, ctx);
      std::vector<CoordPolicyParams> old;
      std::vector<BoxAction> acts;
      for (const auto& o : outs) {
        auto op = o.coord;
        for (auto& m : op.mu) m += 0.01;
        old.push_back(op);
        acts.push_back(sample(op, rng).action);
      }
      ad::Graph g;
      BoundParams b(g, params);
      const auto heads = forward(g.constant(stack_rows(ctx, cfg.input_dim)), b, cfg);
      const auto lr = coord_log_ratio(f, heads.mu, heads.dispersion, acts, old);
      for (std::size_t i = 0; i < acts.size(); ++i)
        EXPECT_EQ(lr.value()[i], log_importance_ratio(acts[i], outs[i].coord, old[i]));
    }
}

TEST(CoordLogRatio, FamilyMismatchThrows) {
  auto cfg = small_policy(Family::gaussian, Sharing::shared);
  Rng rng = make_rng(14);
  const auto params = init_policy_params(cfg, rng);
  const std::vector<std::vector<double>> ctx{{1, 0, 0.5, -0.5, 0.2, 0.1}};
  auto old = evaluate_policy(params, cfg, ctx)[0].coord;
  old.family = Family::laplace;
  ad::Graph g;
  BoundParams b(g, params);
  const auto heads = forward(g.constant(stack_rows(ctx, cfg.input_dim)), b, cfg);
  const std::vector<BoxAction> acts{BoxAction{old.mu}};
  const std::vector<CoordPolicyParams> olds{old};
  EXPECT_THROW(coord_log_ratio(Family::gaussian, heads.mu, heads.dispersion, acts, olds), PolicyMismatch);
}
