#pragma once

// Batched episode driver and evaluation summaries.
//
// Episodes advance in lockstep: every still-running episode asks the actor for
// a decision, then all of them step. Actors see the whole batch so network
// actors can forward all contexts at once; each row is computed independently,
// so results do not depend on batch composition.

#include <cmath>
#include <concepts>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "coordrl/env/env.hpp"
#include "coordrl/grpo/reward.hpp"
#include "coordrl/policy/network.hpp"

namespace coordrl {

struct Decision {
  std::size_t token = 0;
  std::optional<BoxAction> box;
  double dispersion = std::numeric_limits<double>::quiet_NaN();
};

template <class A>
concept EpisodeActor = requires(A a, std::span<const Episode* const> eps) {
  { a.act(eps) } -> std::same_as<std::vector<Decision>>;
};

/// Deterministic inference: argmax token, coordinate mean (or argmax bins).
struct GreedyActor {
  const ParamSet* params;
  PolicyConfig cfg;

  std::vector<Decision> act(std::span<const Episode* const> eps) {
    std::vector<std::vector<double>> ctx;
    ctx.reserve(eps.size());
    for (const auto* e : eps) ctx.push_back(e->context());
    const auto outs = evaluate_policy(*params, cfg, ctx);
    std::vector<Decision> d(eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
      d[i].token = outs[i].vocab.argmax();
      if (d[i].token == Vocabulary::zoom) {
        d[i].box = outs[i].quantized ? quantized_argmax(*outs[i].quantized).decoded
                                     : deterministic_action(outs[i].coord);
        d[i].dispersion = outs[i].coord.mean_dispersion();
      }
    }
    return d;
  }
};

/// Stochastic actor with one RNG stream per episode slot.
struct SamplingActor {
  const ParamSet* params;
  PolicyConfig cfg;
  std::vector<Rng>* rngs;  // indexed by the episode's position in the full batch
  const Episode* first = nullptr;

  std::vector<Decision> act(std::span<const Episode* const> eps) {
    std::vector<std::vector<double>> ctx;
    for (const auto* e : eps) ctx.push_back(e->context());
    const auto outs = evaluate_policy(*params, cfg, ctx);
    std::vector<Decision> d(eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
      Rng& rng = (*rngs)[static_cast<std::size_t>(eps[i] - first)];
      d[i].token = sample_categorical(outs[i].vocab.log_probs, rng);
      if (d[i].token == Vocabulary::zoom) {
        d[i].box = outs[i].quantized ? quantized_sample(*outs[i].quantized, rng).decoded
                                     : sample(outs[i].coord, rng).action;
        d[i].dispersion = outs[i].coord.mean_dispersion();
      }
    }
    return d;
  }
};

/// Scripted oracle: zoom exactly on the target, then answer it.
struct OracleActor {
  std::vector<Decision> act(std::span<const Episode* const> eps) {
    std::vector<Decision> d(eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
      const Episode& e = *eps[i];
      if (e.zooms_used() == 0) {
        d[i].token = Vocabulary::zoom;
        d[i].box = e.task().target;
        d[i].dispersion = 0.0;
      } else {
        d[i].token = e.config().vocab().answer(e.task().answer);
      }
    }
    return d;
  }
};

struct EpisodeResult {
  EpisodeRecord record;
  Outcome outcome;
  RewardComponents reward;
  /// Mean dispersion over the episode's coordinate decisions; NaN if none.
  double dispersion = std::numeric_limits<double>::quiet_NaN();
};

template <EpisodeActor Actor>
std::vector<EpisodeResult> run_episodes(Actor& actor, std::span<const Task> tasks,
                                        const EnvConfig& env, const RewardWeights& weights) {
  std::vector<Episode> eps;
  eps.reserve(tasks.size());
  for (const auto& t : tasks) eps.emplace_back(t, env);
  std::vector<double> disp_sum(tasks.size(), 0.0);
  std::vector<std::size_t> disp_count(tasks.size(), 0);
  if constexpr (requires { actor.first; }) actor.first = eps.data();
  while (true) {
    std::vector<const Episode*> active;
    std::vector<std::size_t> index;
    for (std::size_t i = 0; i < eps.size(); ++i)
      if (!eps[i].done()) {
        active.push_back(&eps[i]);
        index.push_back(i);
      }
    if (active.empty()) break;
    const auto decisions = actor.act(active);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = index[a];
      if (decisions[a].box && std::isfinite(decisions[a].dispersion)) {
        disp_sum[i] += decisions[a].dispersion;
        ++disp_count[i];
      }
      eps[i].step(decisions[a].token, decisions[a].box);
    }
  }
  std::vector<EpisodeResult> out(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    out[i].record = eps[i].record();
    out[i].outcome = eps[i].outcome();
    out[i].reward = compute_reward(out[i].outcome, weights);
    if (disp_count[i]) out[i].dispersion = disp_sum[i] / static_cast<double>(disp_count[i]);
  }
  return out;
}

struct EvalSummary {
  std::size_t tasks = 0;
  double accuracy = 0.0;
  double mean_iou = 0.0;
  double mean_reward = 0.0;
  double dispersion_success = std::numeric_limits<double>::quiet_NaN();
  double dispersion_failure = std::numeric_limits<double>::quiet_NaN();
  std::size_t successes_with_dispersion = 0;
  std::size_t failures_with_dispersion = 0;
};

inline EvalSummary summarize(std::span<const EpisodeResult> results) {
  EvalSummary s;
  s.tasks = results.size();
  if (results.empty()) return s;
  double ds = 0.0, df = 0.0;
  for (const auto& r : results) {
    s.accuracy += r.outcome.correct ? 1.0 : 0.0;
    s.mean_iou += r.outcome.last_iou;
    s.mean_reward += r.reward.total;
    if (std::isfinite(r.dispersion)) {
      if (r.outcome.correct) {
        ds += r.dispersion;
        ++s.successes_with_dispersion;
      } else {
        df += r.dispersion;
        ++s.failures_with_dispersion;
      }
    }
  }
  const double n = static_cast<double>(results.size());
  s.accuracy /= n;
  s.mean_iou /= n;
  s.mean_reward /= n;
  if (s.successes_with_dispersion) s.dispersion_success = ds / static_cast<double>(s.successes_with_dispersion);
  if (s.failures_with_dispersion) s.dispersion_failure = df / static_cast<double>(s.failures_with_dispersion);
  return s;
}

/// Deterministic-mean evaluation of a parameter set.
inline EvalSummary evaluate(const ParamSet& params, const PolicyConfig& cfg, const EnvConfig& env,
                            std::span<const Task> tasks, const RewardWeights& weights) {
  GreedyActor actor{&params, cfg};
  const auto results = run_episodes(actor, tasks, env, weights);
  return summarize(results);
}

/// Evaluation with sampled actions; `seed` fixes one stream per task.
inline EvalSummary evaluate_sampled(const ParamSet& params, const PolicyConfig& cfg,
                                    const EnvConfig& env, std::span<const Task> tasks,
                                    const RewardWeights& weights, std::uint64_t seed) {
  std::vector<Rng> rngs;
  rngs.reserve(tasks.size());
  for (const auto& t : tasks) rngs.push_back(make_rng(seed, {0x5a3e, t.id}));
  SamplingActor actor{&params, cfg, &rngs};
  const auto results = run_episodes(actor, tasks, env, weights);
  return summarize(results);
}

}  // namespace coordrl
