#pragma once

// Group-relative policy optimization over zoom-in episodes.
//
// A rollout group is G trajectories of the frozen old policy on one task.
// Each trajectory is scored by the outcome reward and standardized within its
// group. The clipped surrogate
//
//   L = -(1/G) sum_i (1/T_i) sum_t min(r_t A_i, clip(r_t, 1-eps, 1+eps) A_i)
//       + beta * KL(pi_new || pi_ref)
//
// treats every decoding step uniformly. For token steps r_t is the categorical
// probability ratio; for coordinate steps it is the closed-form density ratio
// of the whole 4-d box; in quantized mode each coordinate bin is its own step.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "coordrl/diffcore/adam.hpp"
#include "coordrl/diffcore/graph.hpp"
#include "coordrl/diffcore/params.hpp"
#include "coordrl/env/env.hpp"
#include "coordrl/eval.hpp"
#include "coordrl/grpo/reward.hpp"
#include "coordrl/policy/network.hpp"
#include "coordrl/rng.hpp"
#include "coordrl/sft/sft.hpp"

namespace coordrl {

enum class StepKind { token, coord, coord_bin };

inline std::string to_string(StepKind k) {
  switch (k) {
    case StepKind::token: return "token";
    case StepKind::coord: return "coord";
    default: return "coord_bin";
  }
}

/// One decoding step as recorded at rollout time.
struct Step {
  StepKind kind = StepKind::token;
  std::vector<double> context;
  std::size_t token = 0;          // token id, or bin index for coord_bin
  std::size_t coordinate = 0;     // coord_bin only
  double old_log_prob = 0.0;      // token / coord_bin
  BoxAction action;               // coord only
  CoordPolicyParams old_params;   // coord only
  NoiseRecord noise;              // coord only
};

struct Trajectory {
  std::vector<Step> steps;
  EpisodeRecord record;
  Outcome outcome;
  RewardComponents reward;
  double dispersion = std::numeric_limits<double>::quiet_NaN();
};

struct GroupRollout {
  Task task;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;
};

/// Group-standardized advantages with the population standard deviation.
/// A group whose spread is below `degeneracy_eps` gets all-zero advantages.
inline std::vector<double> advantages(std::span<const double> rewards, double degeneracy_eps = 1e-8) {
  std::vector<double> a(rewards.size(), 0.0);
  if (rewards.empty()) return a;
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  if (!(sd >= degeneracy_eps)) return a;
  for (std::size_t i = 0; i < rewards.size(); ++i) a[i] = (rewards[i] - mean) / sd;
  return a;
}

struct RolloutConfig {
  std::size_t group_size = 16;
  double degeneracy_eps = 1e-8;
  RewardWeights weights;
};

/// G trajectories of `old_params` on `task`. Trajectory i draws from its own
/// stream derive_seed(seed, task.id, i), so results do not depend on batching.
inline GroupRollout rollout_group(const Task& task, const ParamSet& old_params,
                                  const PolicyConfig& cfg, const EnvConfig& env,
                                  const RolloutConfig& rc, std::uint64_t seed) {
  if (rc.group_size < 1) throw ConfigError("rl.group_size must be >= 1");
  const std::size_t G = rc.group_size;
  GroupRollout out;
  out.task = task;
  out.trajectories.resize(G);
  std::vector<Episode> eps;
  std::vector<Rng> rngs;
  eps.reserve(G);
  for (std::size_t i = 0; i < G; ++i) {
    eps.emplace_back(out.task, env);
    rngs.push_back(make_rng(seed, {task.id, i}));
  }
  std::vector<double> disp_sum(G, 0.0);
  std::vector<std::size_t> disp_n(G, 0);

  while (true) {
    std::vector<std::size_t> active;
    std::vector<std::vector<double>> ctx;
    for (std::size_t i = 0; i < G; ++i)
      if (!eps[i].done()) {
        active.push_back(i);
        ctx.push_back(eps[i].context());
      }
    if (active.empty()) break;
    const auto outs = evaluate_policy(old_params, cfg, ctx);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      Rng& rng = rngs[i];
      auto& traj = out.trajectories[i];
      const auto& po = outs[a];
      Step ts;
      ts.kind = StepKind::token;
      ts.context = ctx[a];
      ts.token = sample_categorical(po.vocab.log_probs, rng);
      ts.old_log_prob = po.vocab.log_probs[ts.token];
      traj.steps.push_back(ts);
      if (ts.token != Vocabulary::zoom) {
        eps[i].step(ts.token);
        continue;
      }
      BoxAction box;
      if (po.quantized) {
        const auto qs = quantized_sample(*po.quantized, rng);
        for (std::size_t j = 0; j < kBoxDims; ++j) {
          Step bs;
          bs.kind = StepKind::coord_bin;
          bs.context = ctx[a];
          bs.token = qs.bins[j];
          bs.coordinate = j;
          bs.old_log_prob = po.quantized->log_probs[j][qs.bins[j]];
          traj.steps.push_back(std::move(bs));
        }
        box = qs.decoded;
      } else {
        const auto cs = sample(po.coord, rng);
        Step cstep;
        cstep.kind = StepKind::coord;
        cstep.context = ctx[a];
        cstep.action = cs.action;
        cstep.old_params = po.coord;
        cstep.noise = cs.noise;
        traj.steps.push_back(std::move(cstep));
        box = cs.action;
      }
      disp_sum[i] += po.coord.mean_dispersion();
      ++disp_n[i];
      if (!box.all_finite()) {
        eps[i].abort();
        continue;
      }
      try {
        eps[i].step(ts.token, box);
      } catch (const std::exception&) {
        eps[i].abort();
      }
    }
  }

  for (std::size_t i = 0; i < G; ++i) {
    auto& traj = out.trajectories[i];
    traj.record = eps[i].record();
    traj.outcome = eps[i].outcome();
    traj.reward = compute_reward(traj.outcome, rc.weights);
    if (disp_n[i]) traj.dispersion = disp_sum[i] / static_cast<double>(disp_n[i]);
    out.rewards.push_back(traj.reward.total);
  }
  out.advantages = advantages(out.rewards, rc.degeneracy_eps);
  return out;
}

struct SurrogateConfig {
  double clip_eps = 0.2;
  double beta = 0.0;
};

/// Per-step quantities from one surrogate evaluation, in rollout order.
struct StepTerm {
  std::size_t group = 0, trajectory = 0, step = 0;
  StepKind kind = StepKind::token;
  double log_ratio = 0.0;
  double advantage = 0.0;
  double weight = 0.0;
  double term = 0.0;  // min(r A, clip(r) A)
};

struct SurrogateParts {
  ad::Var loss;
  ad::Var objective;  // weighted sum of clipped terms (before negation)
  std::optional<ad::Var> kl;
  std::vector<StepTerm> steps;
};

/// Builds the clipped surrogate on `g`. `reference`, when given together with
/// beta > 0, adds beta times the KL to the reference policy: full categorical
/// KL on token and bin steps, mean-only KL on continuous coordinate steps.
inline SurrogateParts surrogate_parts(ad::Graph& g, const BoundParams& params,
                                      std::span<const GroupRollout> groups, const PolicyConfig& cfg,
                                      const SurrogateConfig& sc,
                                      const ParamSet* reference = nullptr) {
  if (groups.empty()) throw std::invalid_argument("surrogate_loss: no groups");
  if (!(sc.clip_eps > 0.0)) throw ConfigError("rl.clip_eps must be > 0");
  if (sc.beta < 0.0) throw ConfigError("rl.beta must be >= 0");

  struct Index {
    std::vector<std::size_t> rows, ids, where;
    std::vector<double> old_lp, adv, w;
  };
  Index tok, bin, crd;
  std::vector<BoxAction> actions;
  std::vector<CoordPolicyParams> olds;
  std::vector<std::vector<double>> contexts;
  std::vector<StepTerm> steps;

  const double ng = static_cast<double>(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& grp = groups[gi];
    if (grp.advantages.size() != grp.trajectories.size())
      throw std::invalid_argument("surrogate_loss: advantages do not match trajectories");
    const double G = static_cast<double>(grp.trajectories.size());
    for (std::size_t ti = 0; ti < grp.trajectories.size(); ++ti) {
      const auto& traj = grp.trajectories[ti];
      if (traj.steps.empty()) continue;
      const double w = 1.0 / (ng * G * static_cast<double>(traj.steps.size()));
      const double A = grp.advantages[ti];
      const std::vector<double>* prev = nullptr;
      for (std::size_t si = 0; si < traj.steps.size(); ++si) {
        const Step& s = traj.steps[si];
        if (!prev || *prev != s.context) contexts.push_back(s.context);
        prev = &s.context;
        const std::size_t row = contexts.size() - 1;
        const std::size_t at = steps.size();
        steps.push_back({gi, ti, si, s.kind, 0.0, A, w, 0.0});
        Index* idx = nullptr;
        switch (s.kind) {
          case StepKind::token:
            idx = &tok;
            idx->rows.push_back(row);
            idx->ids.push_back(s.token);
            idx->old_lp.push_back(s.old_log_prob);
            break;
          case StepKind::coord_bin:
            if (cfg.coords != CoordMode::quantized)
              throw PolicyMismatch("bin step in a continuous-coordinate policy");
            idx = &bin;
            idx->rows.push_back(row * kBoxDims + s.coordinate);
            idx->ids.push_back(s.token);
            idx->old_lp.push_back(s.old_log_prob);
            break;
          case StepKind::coord:
            if (cfg.coords != CoordMode::continuous)
              throw PolicyMismatch("continuous coordinate step in a quantized policy");
            if (s.old_params.family != cfg.family || s.old_params.sharing != cfg.sharing)
              throw PolicyMismatch("rollout policy family/sharing differs from the trained policy");
            idx = &crd;
            idx->rows.push_back(row);
            actions.push_back(s.action);
            olds.push_back(s.old_params);
            break;
        }
        idx->adv.push_back(A);
        idx->w.push_back(w);
        idx->where.push_back(at);
      }
    }
  }
  if (steps.empty()) throw std::invalid_argument("surrogate_loss: no steps");

  const Tensor ctx = stack_rows(contexts, cfg.input_dim);
  const auto heads = forward(g.constant(ctx), params, cfg);
  std::optional<std::vector<PolicyOutput>> ref;
  const bool with_kl = sc.beta > 0.0 && reference != nullptr;
  if (with_kl) ref = evaluate_policy(*reference, cfg, contexts);

  std::vector<ad::Var> objective_terms, kl_terms;
  auto add_kind = [&](const Index& idx, ad::Var log_ratio) {
    const Tensor adv = Tensor::vector(idx.adv);
    auto r = ad::exp(log_ratio);
    auto unclipped = ad::mul_const(r, adv);
    auto clipped = ad::mul_const(ad::clip(r, 1.0 - sc.clip_eps, 1.0 + sc.clip_eps), adv);
    auto term = ad::minimum(unclipped, clipped);
    for (std::size_t i = 0; i < idx.where.size(); ++i) {
      steps[idx.where[i]].log_ratio = log_ratio.value()[i];
      steps[idx.where[i]].term = term.value()[i];
    }
    objective_terms.push_back(ad::dot_const(term, Tensor::vector(idx.w)));
  };
  auto categorical_kl = [&](const Index& idx, ad::Var lp_rows, const Tensor& ref_rows) {
    auto kl = ad::sum_rows(ad::mul(ad::exp(lp_rows), ad::sub_const(lp_rows, ref_rows)));
    kl_terms.push_back(ad::dot_const(kl, Tensor::vector(idx.w)));
  };

  if (!tok.rows.empty()) {
    auto lp_rows = ad::select_rows(heads.vocab_logp, tok.rows);
    add_kind(tok, ad::sub_const(ad::gather(lp_rows, tok.ids), Tensor::vector(tok.old_lp)));
    if (with_kl) {
      const std::size_t V = cfg.vocab_size;
      Tensor rr(Shape{tok.rows.size(), V});
      for (std::size_t i = 0; i < tok.rows.size(); ++i)
        for (std::size_t v = 0; v < V; ++v) rr.at(i, v) = (*ref)[tok.rows[i]].vocab.log_probs[v];
      categorical_kl(tok, lp_rows, rr);
    }
  }
  if (!bin.rows.empty()) {
    auto lp_rows = ad::select_rows(*heads.bin_logp, bin.rows);
    add_kind(bin, ad::sub_const(ad::gather(lp_rows, bin.ids), Tensor::vector(bin.old_lp)));
    if (with_kl) {
      const std::size_t B = cfg.bins;
      Tensor rr(Shape{bin.rows.size(), B});
      for (std::size_t i = 0; i < bin.rows.size(); ++i) {
        const auto& q = *(*ref)[bin.rows[i] / kBoxDims].quantized;
        for (std::size_t b = 0; b < B; ++b) rr.at(i, b) = q.log_probs[bin.rows[i] % kBoxDims][b];
      }
      categorical_kl(bin, lp_rows, rr);
    }
  }
  if (!crd.rows.empty()) {
    auto mu_rows = ad::select_rows(heads.mu, crd.rows);
    auto disp_rows = ad::select_rows(heads.dispersion, crd.rows);
    add_kind(crd, coord_log_ratio(cfg.family, mu_rows, disp_rows, actions, olds));
    if (with_kl) {
      Tensor rm(Shape{crd.rows.size(), kBoxDims});
      for (std::size_t i = 0; i < crd.rows.size(); ++i)
        for (std::size_t j = 0; j < kBoxDims; ++j) rm.at(i, j) = (*ref)[crd.rows[i]].coord.mu[j];
      auto kl = ad::sum_rows(ad::square(ad::sub_const(mu_rows, rm)));
      kl_terms.push_back(ad::dot_const(kl, Tensor::vector(crd.w)));
    }
  }

  SurrogateParts parts;
  parts.objective = ad::add_all(objective_terms);
  parts.loss = ad::scale(parts.objective, -1.0);
  if (!kl_terms.empty()) {
    parts.kl = ad::add_all(kl_terms);
    parts.loss = parts.loss + ad::scale(*parts.kl, sc.beta);
  }
  parts.steps = std::move(steps);
  return parts;
}

inline ad::Var surrogate_loss(ad::Graph& g, const BoundParams& params,
                              std::span<const GroupRollout> groups, const PolicyConfig& cfg,
                              const SurrogateConfig& sc, const ParamSet* reference = nullptr) {
  return surrogate_parts(g, params, groups, cfg, sc, reference).loss;
}

// ---------------------------------------------------------------------------
// Trajectory dumps

inline void dump_trajectory(std::ostream& os, const Trajectory& t, const Vocabulary& vocab) {
  os << "trajectory reward=" << t.reward.total << " accuracy=" << t.reward.accuracy
     << " format=" << t.reward.format << " zoom=" << t.reward.zoom
     << " correct=" << t.outcome.correct << " grounded=" << t.outcome.grounded
     << " zooms=" << t.outcome.zoom_count << " iou=" << t.outcome.last_iou << '\n';
  for (const auto& s : t.steps) {
    os << "  step " << to_string(s.kind);
    if (s.kind == StepKind::token) os << ' ' << vocab.name(s.token) << " old_logp=" << s.old_log_prob;
    if (s.kind == StepKind::coord_bin)
      os << " coord=" << s.coordinate << " bin=" << s.token << " old_logp=" << s.old_log_prob;
    if (s.kind == StepKind::coord) {
      os << " box=";
      for (std::size_t j = 0; j < kBoxDims; ++j) os << (j ? "," : "") << s.action[j];
      os << " mu=";
      for (std::size_t j = 0; j < kBoxDims; ++j) os << (j ? "," : "") << s.old_params.mu[j];
      os << " scale=";
      for (std::size_t j = 0; j < kBoxDims; ++j) os << (j ? "," : "") << s.old_params.scale[j];
    }
    os << '\n';
  }
}

inline void dump_group(std::ostream& os, const GroupRollout& grp, const Vocabulary& vocab) {
  os << serialize_task(grp.task) << '\n';
  for (std::size_t i = 0; i < grp.trajectories.size(); ++i) {
    os << "advantage=" << grp.advantages[i] << ' ';
    dump_trajectory(os, grp.trajectories[i], vocab);
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct RlConfig {
  std::size_t iterations = 100;
  std::size_t tasks_per_iteration = 16;
  std::size_t group_size = 16;
  std::size_t inner_steps = 1;
  double clip_eps = 0.2;
  double beta = 0.0;
  double lr = 3e-5;
  double degeneracy_eps = 1e-8;
  RewardWeights weights;
  std::size_t eval_interval = 10;
  std::size_t warmup_sft_steps = 6000;  // used only without an initial checkpoint

  void validate() const {
    if (tasks_per_iteration < 1) throw ConfigError("rl.tasks_per_iteration must be >= 1");
    if (group_size < 2) throw ConfigError("rl.group_size must be >= 2");
    if (inner_steps < 1) throw ConfigError("rl.inner_steps must be >= 1");
    if (!(clip_eps > 0.0) || clip_eps >= 1.0) throw ConfigError("rl.clip_eps must be in (0, 1)");
    if (!(beta >= 0.0)) throw ConfigError("rl.beta must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("rl.lr must be > 0");
    if (!(degeneracy_eps > 0.0)) throw ConfigError("rl.degeneracy_eps must be > 0");
    if (eval_interval < 1) throw ConfigError("rl.eval_interval must be >= 1");
  }
};

struct RlMetrics {
  std::size_t iteration = 0;
  double mean_reward = 0.0;  // over this iteration's rollouts (NaN for the initial row)
  double accuracy = 0.0;     // rollout accuracy
  double mean_iou = 0.0;     // rollout IoU
  double dispersion_success = std::numeric_limits<double>::quiet_NaN();
  double dispersion_failure = std::numeric_limits<double>::quiet_NaN();
  double eval_accuracy = std::numeric_limits<double>::quiet_NaN();
  double eval_iou = std::numeric_limits<double>::quiet_NaN();
  double eval_reward = std::numeric_limits<double>::quiet_NaN();
};

struct TrajectoryLogEntry {
  std::size_t iteration = 0;
  Outcome outcome;
  RewardComponents reward;
  double dispersion = std::numeric_limits<double>::quiet_NaN();
};

struct RlResult {
  ParamSet params;
  std::vector<RlMetrics> metrics;  // metrics[0] evaluates the initial policy
  std::vector<TrajectoryLogEntry> log;
  double seconds = 0.0;
};

struct RlRun {
  EnvConfig env;
  PolicyConfig policy;
  RlConfig rl;
  SftConfig warmup;  // schedule for the SFT warm start; steps come from rl.warmup_sft_steps
  std::vector<Task> eval_tasks;
  std::uint64_t seed = 0;
  std::optional<ParamSet> init;       // SFT parameters; skips the warm start when set
  std::optional<ParamSet> reference;  // KL anchor; defaults to the SFT starting point
  bool keep_log = true;
  std::ostream* dump = nullptr;       // receives every rollout group when set
};

struct RlStart {
  ParamSet params;
  bool from_sft = false;
};

/// Parameters RL starts from: `init`, else an SFT warm start, else a fresh draw.
inline RlStart rl_initial_params(const RlRun& run) {
  if (run.init) return {*run.init, true};
  SftRun sft;
  sft.env = run.env;
  sft.policy = run.policy;
  sft.sft = run.warmup;
  sft.sft.steps = run.rl.warmup_sft_steps;
  sft.sft.eval_interval = std::max<std::size_t>(1, run.rl.warmup_sft_steps);
  sft.seed = run.seed;
  sft.weights = run.rl.weights;
  if (run.rl.warmup_sft_steps == 0) {
    Rng init_rng = make_rng(run.seed, {0x1417});
    return {init_policy_params(bind_policy_dims(run.policy, run.env), init_rng), false};
  }
  return {train_sft(sft).params, true};
}

inline RlResult train_rl(const RlRun& run,
                         const std::function<void(const RlMetrics&)>& on_metrics = {}) {
  run.env.validate();
  run.rl.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const PolicyConfig pcfg = bind_policy_dims(run.policy, run.env);
  RlResult res;
  auto start = rl_initial_params(run);
  res.params = std::move(start.params);
  // Without an SFT stage there is no reference policy and the KL term is dropped.
  std::optional<ParamSet> reference = run.reference;
  if (!reference && start.from_sft) reference = res.params;
  AdamState adam(res.params, AdamConfig{run.rl.lr});
  const RolloutConfig rc{run.rl.group_size, run.rl.degeneracy_eps, run.rl.weights};
  const SurrogateConfig sc{run.rl.clip_eps, run.rl.beta};
  const Vocabulary vocab = run.env.vocab();

  auto attach_eval = [&](RlMetrics& m) {
    if (run.eval_tasks.empty()) return;
    const auto ev = evaluate(res.params, pcfg, run.env, run.eval_tasks, run.rl.weights);
    m.eval_accuracy = ev.accuracy;
    m.eval_iou = ev.mean_iou;
    m.eval_reward = ev.mean_reward;
  };

  {
    RlMetrics m;
    m.mean_reward = std::numeric_limits<double>::quiet_NaN();
    m.accuracy = std::numeric_limits<double>::quiet_NaN();
    m.mean_iou = std::numeric_limits<double>::quiet_NaN();
    attach_eval(m);
    res.metrics.push_back(m);
    if (on_metrics) on_metrics(m);
  }

  Rng task_rng = make_rng(run.seed, {0x9e1});
  std::uint64_t next_id = 1'000'000;
  for (std::size_t it = 1; it <= run.rl.iterations; ++it) {
    const ParamSet old = res.params;
    std::vector<GroupRollout> groups;
    groups.reserve(run.rl.tasks_per_iteration);
    for (std::size_t k = 0; k < run.rl.tasks_per_iteration; ++k) {
      const Task task = new_task(task_rng, run.env, next_id++);
      groups.push_back(rollout_group(task, old, pcfg, run.env, rc, derive_seed(run.seed, {0x2011, it})));
    }

    if (run.dump)
      for (const auto& grp : groups) {
        *run.dump << "iteration " << it << '\n';
        dump_group(*run.dump, grp, vocab);
      }

    RlMetrics m;
    m.iteration = it;
    double n = 0.0, ds = 0.0, df = 0.0, ns = 0.0, nf = 0.0;
    for (const auto& grp : groups)
      for (const auto& t : grp.trajectories) {
        if (t.reward.zoom > 0.0 && !(t.outcome.correct && t.outcome.zoom_count >= 1))
          throw std::logic_error("zoom bonus awarded to a trajectory that is not a correct zoom");
        n += 1.0;
        m.mean_reward += t.reward.total;
        m.accuracy += t.outcome.correct ? 1.0 : 0.0;
        m.mean_iou += t.outcome.last_iou;
        if (std::isfinite(t.dispersion)) {
          if (t.outcome.correct) ds += t.dispersion, ns += 1.0;
          else df += t.dispersion, nf += 1.0;
        }
        if (run.keep_log) res.log.push_back({it, t.outcome, t.reward, t.dispersion});
      }
    m.mean_reward /= n;
    m.accuracy /= n;
    m.mean_iou /= n;
    if (ns > 0.0) m.dispersion_success = ds / ns;
    if (nf > 0.0) m.dispersion_failure = df / nf;

    for (std::size_t inner = 0; inner < run.rl.inner_steps; ++inner) {
      ad::Graph g;
      BoundParams bound(g, res.params);
      const ParamSet* ref = run.rl.beta > 0.0 && reference ? &*reference : nullptr;
      const auto loss = surrogate_loss(g, bound, groups, pcfg, sc, ref);
      if (!std::isfinite(loss.item())) {
        std::ostringstream os;
        os << "RL surrogate became non-finite at iteration " << it << " inner step " << inner
           << " (value " << loss.item() << ")\n";
        for (const auto& grp : groups) {
          bool bad = false;
          for (double a : grp.advantages) bad = bad || !std::isfinite(a);
          for (const auto& t : grp.trajectories)
            for (const auto& s : t.steps)
              bad = bad || !std::isfinite(s.old_log_prob) || !s.action.all_finite();
          if (bad) dump_group(os, grp, vocab);
        }
        if (os.str().find("task id=") == std::string::npos && !groups.empty())
          dump_group(os, groups.front(), vocab);
        throw TrainingDiverged(os.str());
      }
      g.backward(loss);
      adam_step(res.params, bound.gradients(), adam);
    }

    if (it % run.rl.eval_interval == 0 || it == run.rl.iterations) attach_eval(m);
    res.metrics.push_back(m);
    if (on_metrics) on_metrics(m);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Continuous vs quantized convergence

struct ConvergenceRow {
  std::uint64_t seed = 0;
  CoordMode coords = CoordMode::continuous;
  std::optional<std::size_t> steps_to_iou;       // unset: threshold never reached
  std::optional<std::size_t> steps_to_accuracy;
  double final_iou = 0.0;
  double final_accuracy = 0.0;
  std::size_t steps_run = 0;

  friend bool operator==(const ConvergenceRow&, const ConvergenceRow&) = default;
};

inline std::string steps_field(const std::optional<std::size_t>& steps) {
  return steps ? std::to_string(*steps) : std::string("not_reached");
}

struct ConvergenceThresholds {
  double iou = 0.5;
  double accuracy = 0.9;
};

/// SFT runs for both coordinate modes on every seed under the same budget
/// (base.sft). Each row holds the first evaluation step at which each
/// threshold is met; a run stops once both are met.
inline std::vector<ConvergenceRow> convergence_compare(const SftRun& base,
                                                       std::span<const std::uint64_t> seeds,
                                                       const ConvergenceThresholds& thr) {
  if (seeds.size() < 2) throw ConfigError("convergence comparison needs at least 2 seeds");
  std::vector<ConvergenceRow> rows;
  for (std::uint64_t seed : seeds)
    for (CoordMode mode : {CoordMode::continuous, CoordMode::quantized}) {
      SftRun run = base;
      run.seed = seed;
      run.policy.coords = mode;
      run.init.reset();
      ConvergenceRow row{seed, mode, std::nullopt, std::nullopt, 0.0, 0.0, 0};
      run.stop = [&](const SftMetrics& m) {
        if (!row.steps_to_iou && m.mean_iou >= thr.iou) row.steps_to_iou = m.step;
        if (!row.steps_to_accuracy && m.accuracy >= thr.accuracy) row.steps_to_accuracy = m.step;
        return row.steps_to_iou && row.steps_to_accuracy;
      };
      const auto res = train_sft(run);
      row.final_iou = res.metrics.back().mean_iou;
      row.final_accuracy = res.metrics.back().accuracy;
      row.steps_run = res.metrics.back().step;
      rows.push_back(row);
    }
  return rows;
}

}  // namespace coordrl
