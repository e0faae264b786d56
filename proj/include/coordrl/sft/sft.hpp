#pragma once

// Supervised fine-tuning: token cross-entropy on vocabulary positions plus a
// coordinate regression term on coordinate positions.
//
//   l2sq : CE + lambda    * sum ||mu - b*||_2^2
//   l1   : CE + l1_weight * sum ||mu - b*||_1
//
// Both terms are summed over an example's positions and averaged over the
// batch. Dispersion heads never enter the loss, so they receive no gradient.
// In quantized mode each coordinate is a bin-token position trained with CE.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
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
#include "coordrl/policy/network.hpp"
#include "coordrl/rng.hpp"

namespace coordrl {

enum class CoordLoss { l2sq, l1 };
enum class Schedule { constant, cosine };

inline std::string to_string(CoordLoss l) { return l == CoordLoss::l2sq ? "l2sq" : "l1"; }
inline std::string to_string(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

struct SftLossConfig {
  double lambda = 0.3;
  CoordLoss coord_loss = CoordLoss::l2sq;
  double l1_weight = 1.0;

  void validate() const {
    if (!(lambda > 0.0)) throw ConfigError("sft.lambda must be > 0");
    if (!(l1_weight > 0.0)) throw ConfigError("sft.l1_weight must be > 0");
  }
};

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Batch-mean SFT loss as a graph node.
inline ad::Var sft_loss(ad::Graph& g, const BoundParams& params, std::span<const SftExample> batch,
                        const PolicyConfig& cfg, const SftLossConfig& loss_cfg) {
  loss_cfg.validate();
  if (batch.empty()) throw std::invalid_argument("sft_loss: empty batch");

  // Positions emitted from the same hidden state share one forward row.
  std::vector<std::vector<double>> contexts;
  std::vector<std::size_t> tok_rows, tok_ids, coord_rows;
  std::vector<double> coord_targets;
  for (const auto& ex : batch) {
    const std::vector<double>* prev = nullptr;
    for (const auto& pos : ex.positions) {
      if (!prev || *prev != pos.context) contexts.push_back(pos.context);
      prev = &pos.context;
      const std::size_t row = contexts.size() - 1;
      if (pos.kind == PositionKind::token) {
        tok_rows.push_back(row);
        tok_ids.push_back(pos.token);
      } else {
        coord_rows.push_back(row);
        coord_targets.insert(coord_targets.end(), pos.target_box.c.begin(), pos.target_box.c.end());
      }
    }
  }

  const auto heads = forward(g.constant(stack_rows(contexts, cfg.input_dim)), params, cfg);
  std::vector<ad::Var> terms;
  if (!tok_rows.empty()) {
    auto lp = ad::gather(ad::select_rows(heads.vocab_logp, tok_rows), tok_ids);
    terms.push_back(ad::scale(ad::sum(lp), -1.0));
  }
  if (!coord_rows.empty()) {
    if (cfg.coords == CoordMode::continuous) {
      const Tensor target(Shape{coord_rows.size(), kBoxDims}, coord_targets);
      auto diff = ad::sub_const(ad::select_rows(heads.mu, coord_rows), target);
      if (loss_cfg.coord_loss == CoordLoss::l2sq)
        terms.push_back(ad::scale(ad::sum(ad::square(diff)), loss_cfg.lambda));
      else
        terms.push_back(ad::scale(ad::sum(ad::abs(diff)), loss_cfg.l1_weight));
    } else {
      std::vector<std::size_t> bin_rows, bin_ids;
      for (std::size_t i = 0; i < coord_rows.size(); ++i)
        for (std::size_t j = 0; j < kBoxDims; ++j) {
          bin_rows.push_back(coord_rows[i] * kBoxDims + j);
          bin_ids.push_back(bin_index(coord_targets[i * kBoxDims + j], cfg.bins));
        }
      auto lp = ad::gather(ad::select_rows(*heads.bin_logp, bin_rows), bin_ids);
      terms.push_back(ad::scale(ad::sum(lp), -1.0));
    }
  }
  return ad::scale(ad::add_all(terms), 1.0 / static_cast<double>(batch.size()));
}

struct SftConfig {
  SftLossConfig loss;
  double lr = 1e-3;
  std::size_t steps = 6000;
  std::size_t batch = 64;
  Schedule schedule = Schedule::cosine;
  std::size_t eval_interval = 250;

  void validate() const {
    loss.validate();
    if (!(lr > 0.0)) throw ConfigError("sft.lr must be > 0");
    if (batch < 1) throw ConfigError("sft.batch must be >= 1");
    if (eval_interval < 1) throw ConfigError("sft.eval_interval must be >= 1");
  }
};

struct SftMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double mean_iou = 0.0;
};

struct SftResult {
  ParamSet params;
  std::vector<SftMetrics> metrics;  // metrics[0] is the initial evaluation
};

struct SftRun {
  EnvConfig env;
  PolicyConfig policy;
  SftConfig sft;
  std::vector<Task> eval_tasks;
  RewardWeights weights;
  std::uint64_t seed = 0;
  std::optional<ParamSet> init;  // fresh initialization when unset
  /// Ends training early once it returns true for an evaluation record.
  std::function<bool(const SftMetrics&)> stop;
};

inline PolicyConfig bind_policy_dims(PolicyConfig cfg, const EnvConfig& env) {
  cfg.input_dim = env.context_dim();
  cfg.vocab_size = env.vocab().size();
  return cfg;
}

/// Runs SFT; `on_metrics` (optional) sees every evaluation record as it is produced.
inline SftResult train_sft(const SftRun& run,
                           const std::function<void(const SftMetrics&)>& on_metrics = {}) {
  run.env.validate();
  run.sft.validate();
  const PolicyConfig pcfg = bind_policy_dims(run.policy, run.env);
  SftResult result;
  if (run.init) {
    result.params = *run.init;
  } else {
    Rng init_rng = make_rng(run.seed, {0x1417});
    result.params = init_policy_params(pcfg, init_rng);
  }
  AdamState adam(result.params, AdamConfig{run.sft.lr});
  Rng data_rng = make_rng(run.seed, {0x5f7});
  std::uint64_t next_id = 0;

  auto emit = [&](std::size_t step, double loss) {
    const auto ev = evaluate(result.params, pcfg, run.env, run.eval_tasks, run.weights);
    SftMetrics m{step, loss, ev.accuracy, ev.mean_iou};
    result.metrics.push_back(m);
    if (on_metrics) on_metrics(m);
    return run.stop && run.stop(m);
  };

  double last_loss = std::numeric_limits<double>::quiet_NaN();
  if (run.sft.steps == 0) emit(0, last_loss);
  for (std::size_t step = 0; step < run.sft.steps; ++step) {
    const auto batch = gen_sft_dataset(run.sft.batch, data_rng, run.env, next_id);
    next_id += run.sft.batch;
    ad::Graph g;
    BoundParams bound(g, result.params);
    const auto loss = sft_loss(g, bound, batch, pcfg, run.sft.loss);
    last_loss = loss.item();
    if (!std::isfinite(last_loss)) {
      std::ostringstream os;
      os << "SFT loss became non-finite at step " << step << " (value " << last_loss << ")";
      throw TrainingDiverged(os.str());
    }
    if (step == 0 && emit(0, last_loss)) break;
    g.backward(loss);
    const double lr = run.sft.schedule == Schedule::cosine
                          ? cosine_lr(run.sft.lr, static_cast<std::int64_t>(step),
                                      static_cast<std::int64_t>(run.sft.steps))
                          : run.sft.lr;
    adam_step(result.params, bound.gradients(), adam, lr);
    const std::size_t done = step + 1;
    if ((done % run.sft.eval_interval == 0 || done == run.sft.steps) && emit(done, last_loss)) break;
  }
  return result;
}

struct LambdaRow {
  double lambda = 0.0;
  double final_loss = 0.0;
  double accuracy = 0.0;
  double mean_iou = 0.0;

  friend bool operator==(const LambdaRow&, const LambdaRow&) = default;
};

/// One SFT run per lambda, all with the same seeds and evaluation tasks.
inline std::vector<LambdaRow> lambda_sweep(const SftRun& base, std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("lambda_sweep: no values");
  std::vector<LambdaRow> rows;
  for (double lambda : values) {
    SftRun run = base;
    run.sft.loss.lambda = lambda;
    const auto res = train_sft(run);
    const auto& last = res.metrics.back();
    rows.push_back({lambda, last.loss, last.accuracy, last.mean_iou});
  }
  return rows;
}

}  // namespace coordrl
