#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "coordrl/grpo/grpo.hpp"

using namespace coordrl;

namespace {

struct GrpoSetup {
  EnvConfig env;
  PolicyConfig policy;
  ParamSet params;

  explicit GrpoSetup(Family f = Family::laplace, Sharing s = Sharing::shared,
                     CoordMode m = CoordMode::continuous) {
    policy.family = f;
    policy.sharing = s;
    policy.coords = m;
    policy.hidden = 16;
    policy.bins = 8;
    policy.init_dispersion = 0.1;
    policy = bind_policy_dims(policy, env);
    Rng rng = make_rng(31);
    params = init_policy_params(policy, rng);
  }

  std::vector<GroupRollout> groups(std::size_t n, std::size_t G, std::uint64_t seed = 4) const {
    std::vector<GroupRollout> out;
    Rng rng = make_rng(seed);
    for (std::size_t k = 0; k < n; ++k) {
      const auto task = new_task(rng, env, k);
      out.push_back(rollout_group(task, params, policy, env, RolloutConfig{G}, seed));
    }
    return out;
  }
};

std::string dump(const GroupRollout& g, const Vocabulary& v) {
  std::ostringstream os;
  dump_group(os, g, v);
  return os.str();
}

ParamSet nudged(const ParamSet& p, double amount, std::uint64_t seed) {
  ParamSet out = p;
  Rng rng = make_rng(seed);
  std::normal_distribution<double> n(0.0, amount);
  for (auto& [name, t] : out)
    for (auto& v : t.data()) v += n(rng);
  return out;
}

/// A single-step group whose only token step has ratio exp(log_ratio) at `params`.
GroupRollout token_group(const GrpoSetup& s, double log_ratio, double advantage) {
  Rng rng = make_rng(3);
  GroupRollout g;
  g.task = new_task(rng, s.env, 0);
  Episode ep(g.task, s.env);
  Trajectory t;
  Step st;
  st.context = ep.context();
  st.token = Vocabulary::zoom;
  const std::vector<std::vector<double>> ctx{st.context};
  st.old_log_prob = evaluate_policy(s.params, s.policy, ctx)[0].vocab.log_probs[st.token] - log_ratio;
  t.steps.push_back(st);
  g.trajectories.push_back(t);
  g.rewards = {0.0};
  g.advantages = {advantage};
  return g;
}

double objective_value(const GrpoSetup& s, std::span<const GroupRollout> groups, SurrogateConfig sc = {}) {
  ad::Graph g;
  BoundParams b(g, s.params);
  return surrogate_parts(g, b, groups, s.policy, sc).objective.item();
}

}  // namespace

TEST(Advantages, TwoRewards) {
  const std::vector<double> r{1.0, 0.0};
  EXPECT_EQ(advantages(r), (std::vector<double>{1.0, -1.0}));
}

TEST(Advantages, DegenerateGroupIsZero) {
  EXPECT_EQ(advantages(std::vector<double>{2.0, 2.0, 2.0}), (std::vector<double>{0.0, 0.0, 0.0}));
  EXPECT_EQ(advantages(std::vector<double>{1.5}), (std::vector<double>{0.0}));
  EXPECT_EQ(advantages(std::vector<double>{1.0, 1.0 + 1e-10}), (std::vector<double>{0.0, 0.0}));
}

TEST(Advantages, ShiftInvariantAndStandardized) {
  Rng rng = make_rng(5);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> r(16), shifted(16);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = u(rng), shifted[i] = r[i] + 3.0;
    const auto a = advantages(r), b = advantages(shifted);
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_NEAR(a[i], b[i], 1e-12);
      mean += a[i];
      sq += a[i] * a[i];
    }
    mean /= 16.0;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(std::sqrt(sq / 16.0 - mean * mean), 1.0, 1e-12);
  }
}

TEST(Rollout, SingleTrajectoryHasZeroAdvantage) {
  GrpoSetup s;
  const auto g = s.groups(1, 1);
  ASSERT_EQ(g[0].trajectories.size(), 1u);
  EXPECT_EQ(g[0].advantages, std::vector<double>{0.0});
}

TEST(Rollout, DefaultGroupSize) { EXPECT_EQ(RolloutConfig{}.group_size, 16u); }

TEST(Rollout, FixedSeedIsBitIdentical) {
  for (CoordMode m : {CoordMode::continuous, CoordMode::quantized}) {
    GrpoSetup s(Family::gaussian, Sharing::independent, m);
    const auto a = s.groups(3, 8), b = s.groups(3, 8);
    for (std::size_t k = 0; k < a.size(); ++k) {
      EXPECT_EQ(dump(a[k], s.env.vocab()), dump(b[k], s.env.vocab()));
      EXPECT_EQ(a[k].rewards, b[k].rewards);
      EXPECT_EQ(a[k].advantages, b[k].advantages);
      for (std::size_t i = 0; i < a[k].trajectories.size(); ++i)
        for (std::size_t j = 0; j < a[k].trajectories[i].steps.size(); ++j) {
          const auto& x = a[k].trajectories[i].steps[j];
          const auto& y = b[k].trajectories[i].steps[j];
          EXPECT_EQ(x.action, y.action);
          EXPECT_EQ(x.noise, y.noise);
          EXPECT_EQ(x.old_log_prob, y.old_log_prob);
        }
    }
  }
}

TEST(Rollout, TrajectoriesAreWellFormed) {
  GrpoSetup s;
  const auto groups = s.groups(4, 16);
  for (const auto& g : groups) {
    ASSERT_EQ(g.trajectories.size(), 16u);
    for (const auto& t : g.trajectories) {
      EXPECT_EQ(t.reward.total, t.reward.accuracy + t.reward.format + t.reward.zoom);
      EXPECT_LE(t.record.tokens.size(), s.env.max_steps);
      if (t.reward.zoom > 0.0) EXPECT_TRUE(t.outcome.correct && t.outcome.zoom_count >= 1);
      for (const auto& st : t.steps) {
        EXPECT_TRUE(std::isfinite(st.old_log_prob));
        if (st.kind == StepKind::coord) EXPECT_EQ(apply_noise(st.old_params, st.noise), st.action);
      }
    }
  }
}

TEST(Surrogate, RatioIsOneAtRolloutParameters) {
  for (CoordMode m : {CoordMode::continuous, CoordMode::quantized}) {
    GrpoSetup s(Family::gaussian, Sharing::shared, m);
    const auto groups = s.groups(3, 8);
    ad::Graph g;
    BoundParams b(g, s.params);
    const auto parts = surrogate_parts(g, b, groups, s.policy, {});
    for (const auto& st : parts.steps) EXPECT_LE(std::abs(st.log_ratio), 1e-12);
    // With r = 1 the objective is the weighted advantage sum: the group mean of A.
    double expected = 0.0;
    for (const auto& grp : groups)
      expected += std::accumulate(grp.advantages.begin(), grp.advantages.end(), 0.0) /
                  static_cast<double>(grp.advantages.size());
    expected /= static_cast<double>(groups.size());
    EXPECT_NEAR(parts.objective.item(), expected, 1e-12);
    g.backward(parts.loss);
    double norm = 0.0;
    for (const auto& [name, t] : b.gradients())
      for (double v : t.values()) norm += v * v;
    const bool any_signal = std::any_of(groups.begin(), groups.end(), [](const GroupRollout& grp) {
      return std::any_of(grp.advantages.begin(), grp.advantages.end(), [](double a) { return a != 0.0; });
    });
    if (any_signal) EXPECT_GT(norm, 0.0);
  }
}

TEST(Surrogate, ClipExample) {
  GrpoSetup s;
  const std::vector<GroupRollout> pos{token_group(s, std::log(2.0), 1.0)};
  EXPECT_NEAR(objective_value(s, pos), 1.2, 1e-12);
  const std::vector<GroupRollout> neg{token_group(s, std::log(2.0), -1.0)};
  EXPECT_NEAR(objective_value(s, neg), -2.0, 1e-12);
  const std::vector<GroupRollout> low{token_group(s, std::log(0.5), 1.0)};
  EXPECT_NEAR(objective_value(s, low), 0.5, 1e-12);
}

TEST(Surrogate, TermsBoundedAboveByClipRange) {
  GrpoSetup s(Family::gaussian, Sharing::independent);
  const auto groups = s.groups(4, 8);
  const auto moved = nudged(s.params, 0.05, 9);
  ad::Graph g;
  BoundParams b(g, moved);
  const SurrogateConfig sc{0.2, 0.0};
  const auto parts = surrogate_parts(g, b, groups, s.policy, sc);
  for (const auto& st : parts.steps) EXPECT_LE(st.term, (1.0 + sc.clip_eps) * std::abs(st.advantage) + 1e-15);
}

TEST(Surrogate, ContinuousRatioEqualsImportanceRatio) {
  for (Family f : {Family::gaussian, Family::laplace})
    for (Sharing sh : {Sharing::shared, Sharing::independent}) {
      GrpoSetup s(f, sh);
      const auto groups = s.groups(3, 8);
      const auto moved = nudged(s.params, 0.02, 10);
      ad::Graph g;
      BoundParams b(g, moved);
      const auto parts = surrogate_parts(g, b, groups, s.policy, {});
      std::size_t checked = 0;
      for (const auto& st : parts.steps) {
        if (st.kind != StepKind::coord) continue;
        const auto& step = groups[st.group].trajectories[st.trajectory].steps[st.step];
        const std::vector<std::vector<double>> ctx{step.context};
        const auto now = evaluate_policy(moved, s.policy, ctx)[0].coord;
        EXPECT_EQ(std::exp(st.log_ratio), importance_ratio(step.action, now, step.old_params));
        ++checked;
      }
      EXPECT_GT(checked, 0u);
    }
}

TEST(Surrogate, FamilyMismatchThrows) {
  GrpoSetup s(Family::gaussian);
  const auto groups = s.groups(2, 8);
  auto other = s.policy;
  other.family = Family::laplace;
  ad::Graph g;
  BoundParams b(g, s.params);
  bool has_coord = false;
  for (const auto& grp : groups)
    for (const auto& t : grp.trajectories)
      for (const auto& st : t.steps) has_coord = has_coord || st.kind == StepKind::coord;
  ASSERT_TRUE(has_coord);
  EXPECT_THROW(surrogate_parts(g, b, groups, other, {}), PolicyMismatch);
}

TEST(Surrogate, KlOnlyWithReferenceAndBeta) {
  GrpoSetup s;
  const auto groups = s.groups(2, 8);
  const auto moved = nudged(s.params, 0.02, 11);
  {
    ad::Graph g;
    BoundParams b(g, moved);
    EXPECT_FALSE(surrogate_parts(g, b, groups, s.policy, {0.2, 0.5}, nullptr).kl.has_value());
  }
  {
    ad::Graph g;
    BoundParams b(g, moved);
    EXPECT_FALSE(surrogate_parts(g, b, groups, s.policy, {0.2, 0.0}, &s.params).kl.has_value());
  }
  {
    ad::Graph g;
    BoundParams b(g, moved);
    const auto parts = surrogate_parts(g, b, groups, s.policy, {0.2, 0.5}, &s.params);
    ASSERT_TRUE(parts.kl.has_value());
    EXPECT_GT(parts.kl->item(), 0.0);
    EXPECT_NEAR(parts.loss.item(), -parts.objective.item() + 0.5 * parts.kl->item(), 1e-12);
  }
  {
    ad::Graph g;
    BoundParams b(g, s.params);
    const auto parts = surrogate_parts(g, b, groups, s.policy, {0.2, 0.5}, &s.params);
    EXPECT_NEAR(parts.kl->item(), 0.0, 1e-15);
  }
}

TEST(Surrogate, InvalidSettingsRejected) {
  GrpoSetup s;
  const auto groups = s.groups(1, 2);
  ad::Graph g;
  BoundParams b(g, s.params);
  EXPECT_THROW(surrogate_parts(g, b, groups, s.policy, {0.0, 0.0}), ConfigError);
  EXPECT_THROW(surrogate_parts(g, b, groups, s.policy, {0.2, -1.0}), ConfigError);
  EXPECT_THROW(surrogate_parts(g, b, std::span<const GroupRollout>{}, s.policy, {}), std::invalid_argument);
}

namespace {

RlRun small_rl(std::size_t iterations) {
  RlRun run;
  run.policy.hidden = 16;
  run.rl.iterations = iterations;
  run.rl.tasks_per_iteration = 4;
  run.rl.group_size = 8;
  run.rl.eval_interval = 2;
  run.rl.warmup_sft_steps = 0;
  run.eval_tasks = make_task_set(77, 64, run.env);
  run.seed = 2;
  return run;
}

}  // namespace

TEST(TrainRl, ZeroIterationsGiveInitialEvalOnly) {
  const auto res = train_rl(small_rl(0));
  ASSERT_EQ(res.metrics.size(), 1u);
  EXPECT_EQ(res.metrics[0].iteration, 0u);
  EXPECT_TRUE(std::isfinite(res.metrics[0].eval_accuracy));
  EXPECT_TRUE(res.log.empty());
}

TEST(TrainRl, FreshStartHasNoReference) {
  const auto start = rl_initial_params(small_rl(0));
  EXPECT_FALSE(start.from_sft);
}

TEST(TrainRl, ShortRunLogsConsistentTrajectories) {
  auto run = small_rl(3);
  std::ostringstream dumped;
  run.dump = &dumped;
  std::vector<RlMetrics> seen;
  const auto res = train_rl(run, [&](const RlMetrics& m) { seen.push_back(m); });
  ASSERT_EQ(res.metrics.size(), 4u);
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_EQ(res.log.size(), 3u * 4u * 8u);
  for (const auto& e : res.log)
    if (e.reward.zoom > 0.0) EXPECT_TRUE(e.outcome.correct && e.outcome.zoom_count >= 1);
  EXPECT_NE(dumped.str().find("task id="), std::string::npos);
  EXPECT_TRUE(std::isfinite(res.metrics[2].eval_accuracy));
  EXPECT_TRUE(std::isnan(res.metrics[1].eval_accuracy));
  EXPECT_TRUE(std::isfinite(res.metrics[3].eval_accuracy));
}

TEST(TrainRl, Deterministic) {
  const auto a = train_rl(small_rl(2)), b = train_rl(small_rl(2));
  EXPECT_EQ(a.params, b.params);
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t i = 1; i < a.metrics.size(); ++i) EXPECT_EQ(a.metrics[i].mean_reward, b.metrics[i].mean_reward);
}

TEST(TrainRl, NanLossAbortsWithDump) {
  auto run = small_rl(2);
  Rng rng = make_rng(0);
  auto p = init_policy_params(bind_policy_dims(run.policy, run.env), rng);
  p["vocab.bias"][1] = std::numeric_limits<double>::quiet_NaN();
  run.init = p;
  try {
    train_rl(run);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("task id="), std::string::npos);
  }
}

TEST(Convergence, RequiresTwoSeeds) {
  SftRun base;
  const std::vector<std::uint64_t> one{0};
  EXPECT_THROW(convergence_compare(base, one, {}), ConfigError);
}

TEST(Convergence, RowsAndSentinel) {
  SftRun base;
  base.policy.hidden = 16;
  base.policy.bins = 8;
  base.sft.steps = 20;
  base.sft.batch = 16;
  base.sft.eval_interval = 10;
  base.eval_tasks = make_task_set(5, 32, base.env);
  const std::vector<std::uint64_t> seeds{1, 2};
  const ConvergenceThresholds unreachable{1.01, 1.01};
  const auto rows = convergence_compare(base, seeds, unreachable);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    EXPECT_FALSE(r.steps_to_iou.has_value());
    EXPECT_EQ(steps_field(r.steps_to_iou), "not_reached");
    EXPECT_EQ(r.steps_run, 20u);
  }
  EXPECT_EQ(rows[0].coords, CoordMode::continuous);
  EXPECT_EQ(rows[1].coords, CoordMode::quantized);
  EXPECT_EQ(convergence_compare(base, seeds, unreachable), rows);
  const ConvergenceThresholds trivial{0.0, 0.0};
  for (const auto& r : convergence_compare(base, seeds, trivial)) {
    EXPECT_EQ(r.steps_to_iou, std::optional<std::size_t>{0});
    EXPECT_EQ(steps_field(r.steps_to_iou), "0");
  }
}
