#include <gtest/gtest.h>

#include "coordrl/env/env.hpp"
#include "coordrl/eval.hpp"
#include "coordrl/grpo/reward.hpp"

using namespace coordrl;

namespace {

Task fixed_task(std::uint64_t seed = 3) {
  Rng rng = make_rng(seed);
  return new_task(rng, EnvConfig{});
}

}  // namespace

TEST(Canonicalize, SortsCorners) {
  EXPECT_EQ(canonicalize_box(BoxAction{{0.7, 0.2, 0.3, 0.9}}), (BoxAction{{0.3, 0.2, 0.7, 0.9}}));
}

TEST(Canonicalize, Clamps) {
  EXPECT_EQ(canonicalize_box(BoxAction{{-0.5, 0.1, 1.5, 0.2}}), (BoxAction{{0.0, 0.1, 1.0, 0.2}}));
}

TEST(Canonicalize, Idempotent) {
  const BoxAction b{{0.1, 0.2, 0.3, 0.4}};
  EXPECT_EQ(canonicalize_box(b), b);
  const BoxAction raw{{1.3, -0.2, 0.4, 0.8}};
  EXPECT_EQ(canonicalize_box(canonicalize_box(raw)), canonicalize_box(raw));
}

TEST(Iou, WorkedExample) {
  EXPECT_NEAR(iou(BoxAction{{0, 0, 0.5, 0.5}}, BoxAction{{0.25, 0.25, 0.75, 0.75}}), 0.0625 / 0.4375, 1e-15);
  EXPECT_NEAR(iou(BoxAction{{0, 0, 0.5, 0.5}}, BoxAction{{0.25, 0.25, 0.75, 0.75}}), 0.142857, 1e-6);
}

TEST(Iou, Properties) {
  Rng rng = make_rng(1);
  std::uniform_real_distribution<double> u(-0.2, 1.2);
  for (int i = 0; i < 500; ++i) {
    const BoxAction a{{u(rng), u(rng), u(rng), u(rng)}}, b{{u(rng), u(rng), u(rng), u(rng)}};
    const double v = iou(a, b);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_EQ(v, iou(b, a));
    if (box_area(canonicalize_box(a)) > 0.0) EXPECT_NEAR(iou(a, a), 1.0, 1e-15);
  }
  EXPECT_EQ(iou(BoxAction{{0.2, 0.2, 0.2, 0.5}}, BoxAction{{0.2, 0.2, 0.2, 0.5}}), 0.0);
}

TEST(Task, FixedSeedIsIdentical) { EXPECT_EQ(fixed_task(5), fixed_task(5)); }

TEST(Task, TargetStrictlyInsideWithPositiveArea) {
  Rng rng = make_rng(2);
  const EnvConfig cfg;
  for (int i = 0; i < 2000; ++i) {
    const auto t = new_task(rng, cfg);
    EXPECT_GT(box_area(t.target), 0.0);
    EXPECT_GT(t.target[0], 0.0);
    EXPECT_GT(t.target[1], 0.0);
    EXPECT_LT(t.target[2], 1.0);
    EXPECT_LT(t.target[3], 1.0);
    EXPECT_LT(t.answer, cfg.attributes);
    const double w = t.target[2] - t.target[0], h = t.target[3] - t.target[1];
    EXPECT_GE(w, cfg.target_min - 1e-12);
    EXPECT_LE(w, cfg.target_max + 1e-12);
    EXPECT_GE(h, cfg.target_min - 1e-12);
    EXPECT_LE(h, cfg.target_max + 1e-12);
  }
}

TEST(Task, AnswerIsRoughlyUniform) {
  Rng rng = make_rng(3);
  const EnvConfig cfg;
  std::vector<int> counts(cfg.attributes, 0);
  const int N = 8000;
  for (int i = 0; i < N; ++i) ++counts[new_task(rng, cfg).answer];
  for (int c : counts) EXPECT_NEAR(static_cast<double>(c) / N, 0.25, 0.02);
}

TEST(Task, InfeasibleSizeRangeIsConfigError) {
  EnvConfig cfg;
  cfg.target_min = 0.3;
  cfg.target_max = 0.32;  // no whole number of 1/8 cells in range
  Rng rng = make_rng(0);
  EXPECT_THROW(new_task(rng, cfg), ConfigError);
  EnvConfig small;
  small.grid = 3;
  EXPECT_THROW(small.validate(), ConfigError);
  EnvConfig k1;
  k1.attributes = 1;
  EXPECT_THROW(k1.validate(), ConfigError);
}

TEST(Task, SerializationRoundTrip) {
  const auto t = fixed_task(8);
  EXPECT_EQ(parse_task(serialize_task(t)), t);
}

TEST(Zoom, FullImageNotReadable) {
  const auto t = fixed_task();
  const auto obs = apply_zoom(t, EnvConfig{}, BoxAction{{0, 0, 1, 1}});
  EXPECT_FALSE(obs.readable);
}

TEST(Zoom, ExactTargetReadable) {
  const auto t = fixed_task();
  const auto obs = apply_zoom(t, EnvConfig{}, t.target);
  EXPECT_TRUE(obs.readable);
  EXPECT_EQ(iou(obs.box, t.target), 1.0);
}

TEST(Zoom, DisjointCropNotReadable) {
  Task t = fixed_task();
  const double cx = 0.5 * (t.target[0] + t.target[2]);
  const BoxAction away = cx > 0.5 ? BoxAction{{0.0, 0.0, 0.1, 0.1}} : BoxAction{{0.9, 0.9, 1.0, 1.0}};
  ASSERT_EQ(iou(away, t.target), 0.0);
  EXPECT_FALSE(apply_zoom(t, EnvConfig{}, away).readable);
}

TEST(Zoom, DegenerateCropIsLegal) {
  const auto t = fixed_task();
  const double cx = 0.5 * (t.target[0] + t.target[2]);
  const auto obs = apply_zoom(t, EnvConfig{}, BoxAction{{cx, 0.0, cx, 1.0}});
  EXPECT_FALSE(obs.readable);
}

TEST(Featurize, Deterministic) {
  const auto t = fixed_task();
  const EnvConfig cfg;
  EXPECT_EQ(featurize(t, cfg, Scope::base()), featurize(t, cfg, Scope::base()));
  EXPECT_EQ(featurize(t, cfg, Scope::crop_of(t.target)), featurize(t, cfg, Scope::crop_of(t.target)));
  EXPECT_EQ(featurize(t, cfg, Scope::base()).features.size(), cfg.observation_dim());
  EXPECT_EQ(featurize(t, cfg, Scope::crop_of(t.target)).features.size(), cfg.observation_dim());
}

TEST(Featurize, BaseViewHidesAttribute) {
  const EnvConfig cfg;
  Task t = fixed_task();
  const auto base = featurize(t, cfg, Scope::base()).features;
  for (std::size_t a = 0; a < cfg.attributes; ++a) {
    Task u = t;
    u.answer = a;
    u.target_attributes[u.query_kind] = a;
    for (auto& c : u.cells[u.query_kind]) c = (c + a) % cfg.attributes;
    EXPECT_EQ(featurize(u, cfg, Scope::base()).features, base);
  }
}

TEST(Featurize, ReadableCropRevealsAttribute) {
  const EnvConfig cfg;
  Task t = fixed_task();
  std::vector<std::vector<double>> seen;
  for (std::size_t a = 0; a < cfg.attributes; ++a) {
    Task u = t;
    u.answer = a;
    const auto f = featurize(u, cfg, Scope::crop_of(u.target)).features;
    for (const auto& prev : seen) EXPECT_NE(prev, f);
    seen.push_back(f);
  }
}

TEST(Grade, PerfectTrajectory) {
  const EnvConfig cfg;
  const auto t = fixed_task();
  Episode ep(t, cfg);
  ep.step(Vocabulary::zoom, t.target);
  ep.step(cfg.vocab().answer(t.answer));
  ASSERT_TRUE(ep.done());
  const auto o = ep.outcome();
  EXPECT_TRUE(o.correct);
  EXPECT_TRUE(o.grounded);
  EXPECT_TRUE(o.format_valid);
  EXPECT_EQ(o.zoom_count, 1u);
  EXPECT_EQ(o.last_iou, 1.0);
}

TEST(Grade, TruncatedWithoutAnswer) {
  EnvConfig cfg;
  cfg.max_zoom_calls = 2;
  const auto t = fixed_task();
  Episode ep(t, cfg);
  ep.step(Vocabulary::zoom, t.target);
  ep.step(Vocabulary::zoom, t.target);
  ASSERT_TRUE(ep.done());
  const auto o = ep.outcome();
  EXPECT_TRUE(ep.record().truncated);
  EXPECT_FALSE(o.format_valid);
  EXPECT_FALSE(o.correct);
}

TEST(Grade, ZoomBeyondBudgetIsInvalid) {
  const EnvConfig cfg;
  const auto t = fixed_task();
  Episode ep(t, cfg);
  ep.step(Vocabulary::zoom, t.target);
  ep.step(Vocabulary::zoom, t.target);
  EXPECT_TRUE(ep.record().invalid);
  EXPECT_FALSE(ep.outcome().format_valid);
}

TEST(Grade, NoZoomHasZeroIou) {
  const EnvConfig cfg;
  const auto t = fixed_task();
  Episode ep(t, cfg);
  ep.step(cfg.vocab().answer(t.answer));
  const auto o = ep.outcome();
  EXPECT_EQ(o.zoom_count, 0u);
  EXPECT_EQ(o.last_iou, 0.0);
  EXPECT_FALSE(o.grounded);
}

TEST(Grade, AbortMarksFormatInvalid) {
  const EnvConfig cfg;
  const auto t = fixed_task();
  Episode ep(t, cfg);
  ep.abort();
  EXPECT_TRUE(ep.done());
  EXPECT_FALSE(ep.outcome().format_valid);
}

TEST(Answerability, BlindPolicyScoresOneOverK) {
  // Fixed-answer policy that never zooms; its accuracy is the frequency of one attribute.
  struct Blind {
    std::vector<Decision> act(std::span<const Episode* const> eps) {
      return std::vector<Decision>(eps.size(), Decision{Vocabulary{4}.answer(2), std::nullopt});
    }
  } actor;
  const EnvConfig cfg;
  const auto tasks = make_task_set(17, 8000, cfg);
  const auto s = summarize(run_episodes(actor, tasks, cfg, RewardWeights{}));
  EXPECT_NEAR(s.accuracy, 0.25, 0.02);
  EXPECT_EQ(s.mean_iou, 0.0);
}

TEST(Oracle, EarnsFullRewardEverywhere) {
  OracleActor oracle;
  const EnvConfig cfg;
  const auto tasks = make_task_set(4, 512, cfg);
  const RewardWeights w;
  const auto res = run_episodes(oracle, tasks, cfg, w);
  for (const auto& r : res) {
    EXPECT_TRUE(r.outcome.correct);
    EXPECT_EQ(r.reward.total, w.accuracy + w.format + w.zoom);
  }
  EXPECT_EQ(summarize(res).accuracy, 1.0);
  EXPECT_EQ(summarize(res).mean_iou, 1.0);
}

TEST(SftData, SingleExampleConsistent) {
  const EnvConfig cfg;
  Rng rng = make_rng(6);
  const auto ds = gen_sft_dataset(1, rng, cfg);
  ASSERT_EQ(ds.size(), 1u);
  const auto& ex = ds[0];
  ASSERT_EQ(ex.positions.size(), 3u);
  EXPECT_EQ(ex.positions[0].kind, PositionKind::token);
  EXPECT_EQ(ex.positions[0].token, Vocabulary::zoom);
  EXPECT_EQ(ex.positions[1].kind, PositionKind::coord);
  EXPECT_EQ(ex.positions[1].target_box, ex.task.target);
  EXPECT_EQ(ex.positions[1].context, ex.positions[0].context);
  EXPECT_EQ(ex.positions[2].token, cfg.vocab().answer(ex.task.answer));
  EXPECT_THROW(gen_sft_dataset(0, rng, cfg), std::invalid_argument);
}

TEST(SftData, BoxesOrderedAndDeterministic) {
  const EnvConfig cfg;
  Rng a = make_rng(7), b = make_rng(7);
  const auto da = gen_sft_dataset(200, a, cfg), db = gen_sft_dataset(200, b, cfg);
  for (std::size_t i = 0; i < da.size(); ++i) {
    const auto& box = da[i].positions[1].target_box;
    EXPECT_LT(box[0], box[2]);
    EXPECT_LT(box[1], box[3]);
    EXPECT_EQ(da[i].task, db[i].task);
    EXPECT_EQ(da[i].positions[2].context, db[i].positions[2].context);
  }
}

TEST(Reward, Examples) {
  const RewardWeights w{1.0, 0.5, 0.5};
  Outcome o;
  o.correct = true;
  o.format_valid = true;
  o.zoom_count = 1;
  EXPECT_EQ(compute_reward(o, w).total, 2.0);
  o.zoom_count = 0;
  EXPECT_EQ(compute_reward(o, RewardWeights{1.0, 0.5, 7.0}).zoom, 0.0);
  o.correct = false;
  o.zoom_count = 3;
  EXPECT_EQ(compute_reward(o, w).zoom, 0.0);
  const auto r = compute_reward(o, w);
  EXPECT_EQ(r.total, r.accuracy + r.format + r.zoom);
}
