#pragma once

// Subcommand implementations behind the coordrl command-line tool. Each
// command writes its outputs plus a resolved-config snapshot into cfg.out and
// returns a process exit code.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "coordrl/config.hpp"
#include "coordrl/diffcore/checkpoint.hpp"
#include "coordrl/eval.hpp"
#include "coordrl/grpo/grpo.hpp"
#include "coordrl/sft/sft.hpp"
#include "coordrl/verify/verify.hpp"

namespace coordrl::cli {

enum ExitCode : int { kSuccess = 0, kFailure = 1, kConfigError = 2 };

struct Overrides {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> sets;  // "key=value"
};

/// Defaults, then the config file, then --set pairs, then --seed / --out.
inline Config resolve_config(const Overrides& o) {
  Config cfg = o.config_path ? load_config(*o.config_path) : Config{};
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out = *o.out;
  cfg.validate();
  return cfg;
}

namespace detail {

namespace fs = std::filesystem;

inline fs::path out_path(const Config& cfg, const std::string& name) { return fs::path(cfg.out) / name; }

inline std::ofstream open_out(const Config& cfg, const std::string& name) {
  fs::create_directories(cfg.out);
  std::ofstream os(out_path(cfg, name), std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + out_path(cfg, name).string());
  return os;
}

inline void write_snapshot(const Config& cfg) {
  auto os = open_out(cfg, "config.resolved");
  os << "# resolved configuration\n";
  serialize_config(os, cfg);
}

inline std::string num(double v) { return coordrl::detail::format_double(v); }

inline std::vector<Task> eval_task_set(const Config& cfg) {
  return make_task_set(cfg.eval_seed, cfg.eval_tasks, cfg.env);
}

inline SftRun sft_run(const Config& cfg) {
  SftRun run;
  run.env = cfg.env;
  run.policy = cfg.policy;
  run.sft = cfg.sft;
  run.weights = cfg.rl.weights;
  run.seed = cfg.seed;
  run.eval_tasks = eval_task_set(cfg);
  return run;
}

inline Checkpoint make_checkpoint(const Config& cfg, const ParamSet& params, const std::string& stage) {
  const PolicyConfig p = bind_policy_dims(cfg.policy, cfg.env);
  Checkpoint ck;
  ck.params = params;
  ck.meta = {{"stage", stage},
             {"family", to_string(p.family)},
             {"sharing", to_string(p.sharing)},
             {"coords", to_string(p.coords)},
             {"hidden", std::to_string(p.hidden)},
             {"layers", std::to_string(p.layers)},
             {"bins", std::to_string(p.bins)},
             {"input_dim", std::to_string(p.input_dim)},
             {"vocab_size", std::to_string(p.vocab_size)},
             {"seed", std::to_string(cfg.seed)}};
  return ck;
}

/// Loads a checkpoint and checks it against the configured policy. With
/// `check_family` false the coordinate family may differ (SFT checkpoints
/// seeding RL: the SFT loss never reads the family).
inline ParamSet load_policy_checkpoint(const Config& cfg, const std::string& path,
                                       bool check_family = true) {
  const Checkpoint ck = load_checkpoint(path);
  const PolicyConfig p = bind_policy_dims(cfg.policy, cfg.env);
  std::vector<std::pair<std::string, std::string>> expect = {
      {"sharing", to_string(p.sharing)},      {"coords", to_string(p.coords)},
      {"hidden", std::to_string(p.hidden)},   {"layers", std::to_string(p.layers)},
      {"input_dim", std::to_string(p.input_dim)}, {"vocab_size", std::to_string(p.vocab_size)}};
  if (check_family) expect.emplace_back("family", to_string(p.family));
  if (p.coords == CoordMode::quantized) expect.emplace_back("bins", std::to_string(p.bins));
  for (const auto& [k, v] : expect) {
    const auto it = ck.meta.find(k);
    if (it == ck.meta.end()) throw CheckpointError(path + ": checkpoint lacks meta '" + k + "'");
    if (it->second != v)
      throw CheckpointError(path + ": checkpoint has " + k + "=" + it->second + " but the config needs " + v);
  }
  Rng rng = make_rng(0);
  if (!ck.params.same_layout(init_policy_params(p, rng)))
    throw CheckpointError(path + ": parameter layout does not match the configured policy");
  return ck.params;
}

inline const char* kSftHeader = "step,loss,accuracy,mean_iou";
inline const char* kRlHeader =
    "iteration,mean_reward,accuracy,mean_iou,dispersion_success,dispersion_failure,eval_accuracy,eval_iou,eval_reward";

inline std::string sft_row(const SftMetrics& m) {
  return std::to_string(m.step) + "," + num(m.loss) + "," + num(m.accuracy) + "," + num(m.mean_iou);
}

inline std::string rl_row(const RlMetrics& m) {
  return std::to_string(m.iteration) + "," + num(m.mean_reward) + "," + num(m.accuracy) + "," +
         num(m.mean_iou) + "," + num(m.dispersion_success) + "," + num(m.dispersion_failure) + "," +
         num(m.eval_accuracy) + "," + num(m.eval_iou) + "," + num(m.eval_reward);
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// Runs every verification suite; writes verify_report.txt with one record per suite.
inline int cmd_verify(const Config& cfg, std::ostream& log) {
  detail::write_snapshot(cfg);
  VerifyOptions opt = cfg.verify;
  opt.seed = cfg.seed;
  auto os = detail::open_out(cfg, "verify_report.txt");
  bool ok = true;
  for (const auto& r : run_all_suites(opt)) {
    write_report(os, r);
    write_report(log, r);
    ok = ok && r.passed;
  }
  log << (ok ? "verify: all suites passed\n" : "verify: FAILED\n");
  return ok ? kSuccess : kFailure;
}

inline RlRun rl_run(const Config& cfg) {
  RlRun run;
  run.env = cfg.env;
  run.policy = cfg.policy;
  run.rl = cfg.rl;
  run.warmup = cfg.sft;
  run.seed = cfg.seed;
  run.eval_tasks = detail::eval_task_set(cfg);
  if (!cfg.rl_init_checkpoint.empty())
    run.init = detail::load_policy_checkpoint(cfg, cfg.rl_init_checkpoint, /*check_family=*/false);
  return run;
}

inline int cmd_sft(const Config& cfg, std::ostream& log) {
  detail::write_snapshot(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  auto metrics = detail::open_out(cfg, "sft_metrics.csv");
  metrics << detail::kSftHeader << '\n';
  const auto res = train_sft(detail::sft_run(cfg), [&](const SftMetrics& m) {
    metrics << detail::sft_row(m) << '\n';
    log << "sft step " << m.step << " loss " << m.loss << " accuracy " << m.accuracy << " iou " << m.mean_iou
        << '\n';
  });
  save_checkpoint(detail::out_path(cfg, "sft.ckpt").string(), detail::make_checkpoint(cfg, res.params, "sft"));
  detail::open_out(cfg, "sft_timing.csv") << "wall_clock_s\n" << detail::seconds_since(t0) << '\n';
  return kSuccess;
}

inline int cmd_rl(const Config& cfg, std::ostream& log) {
  detail::write_snapshot(cfg);
  RlRun run = rl_run(cfg);
  std::optional<std::ofstream> dump;
  if (cfg.rl_dump_trajectories) {
    dump.emplace(detail::open_out(cfg, "trajectories.txt"));
    run.dump = &*dump;
  }
  auto metrics = detail::open_out(cfg, "rl_metrics.csv");
  auto timing = detail::open_out(cfg, "rl_timing.csv");
  metrics << detail::kRlHeader << '\n';
  timing << "iteration,wall_clock_s\n";
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const auto res = train_rl(run, [&](const RlMetrics& m) {
      metrics << detail::rl_row(m) << '\n';
      timing << m.iteration << ',' << detail::seconds_since(t0) << '\n';
      log << "rl iteration " << m.iteration;
      if (m.iteration > 0)
        log << " reward " << m.mean_reward << " accuracy " << m.accuracy << " iou " << m.mean_iou;
      if (!std::isnan(m.eval_accuracy))
        log << " eval_accuracy " << m.eval_accuracy << " eval_iou " << m.eval_iou;
      log << '\n';
    });
    save_checkpoint(detail::out_path(cfg, "rl.ckpt").string(), detail::make_checkpoint(cfg, res.params, "rl"));
  } catch (const TrainingDiverged& e) {
    detail::open_out(cfg, "diverged.txt") << e.what();
    throw;
  }
  return kSuccess;
}

/// Deterministic-mean evaluation of a checkpoint on the fixed eval task set.
inline int cmd_eval(const Config& cfg, const std::string& checkpoint, std::ostream& log) {
  if (checkpoint.empty()) throw ConfigError("eval requires --checkpoint PATH");
  detail::write_snapshot(cfg);
  const ParamSet params = detail::load_policy_checkpoint(cfg, checkpoint);
  const PolicyConfig pcfg = bind_policy_dims(cfg.policy, cfg.env);
  const auto tasks = detail::eval_task_set(cfg);
  const auto s = evaluate(params, pcfg, cfg.env, tasks, cfg.rl.weights);
  auto os = detail::open_out(cfg, "eval_metrics.csv");
  os << "tasks,accuracy,mean_iou,mean_reward,dispersion_success,dispersion_failure\n";
  os << s.tasks << ',' << detail::num(s.accuracy) << ',' << detail::num(s.mean_iou) << ','
     << detail::num(s.mean_reward) << ',' << detail::num(s.dispersion_success) << ','
     << detail::num(s.dispersion_failure) << '\n';
  log << "eval accuracy " << s.accuracy << " iou " << s.mean_iou << " reward " << s.mean_reward << '\n';
  return kSuccess;
}

// ---------------------------------------------------------------------------
// Ablations

namespace detail {

struct PolicyVariant {
  std::string name;
  Family family;
  Sharing sharing;
  CoordLoss loss;
};

/// Gaussian pairs with the squared-L2 SFT loss and Laplace with L1.
inline CoordLoss paired_loss(Family f) { return f == Family::gaussian ? CoordLoss::l2sq : CoordLoss::l1; }

struct VariantOutcome {
  double sft_accuracy = 0.0, sft_iou = 0.0;
  double rl_accuracy = 0.0, rl_iou = 0.0;
  double first_reward = 0.0, last_reward = 0.0;
};

inline VariantOutcome run_variant(const Config& base, const PolicyVariant& v, std::uint64_t seed) {
  Config cfg = base;
  cfg.seed = seed;
  cfg.policy.family = v.family;
  cfg.policy.sharing = v.sharing;
  cfg.sft.loss.coord_loss = v.loss;
  const auto sft = train_sft(sft_run(cfg));
  RlRun run = rl_run(cfg);
  run.init = sft.params;
  run.keep_log = false;
  const auto rl = train_rl(run);
  VariantOutcome o;
  o.sft_accuracy = sft.metrics.back().accuracy;
  o.sft_iou = sft.metrics.back().mean_iou;
  o.rl_accuracy = rl.metrics.back().eval_accuracy;
  o.rl_iou = rl.metrics.back().eval_iou;
  if (rl.metrics.size() > 1) {
    o.first_reward = rl.metrics[1].mean_reward;
    o.last_reward = rl.metrics.back().mean_reward;
  }
  return o;
}

inline void policy_ablation(const Config& cfg, const std::vector<PolicyVariant>& variants, std::ostream& table,
                            std::ostream& runs, std::ostream& log) {
  table << "variant,family,sharing,sft_loss,seeds,sft_accuracy,sft_iou,rl_accuracy,rl_iou,first_reward,last_reward\n";
  runs << "variant,seed,sft_accuracy,sft_iou,rl_accuracy,rl_iou,first_reward,last_reward\n";
  for (const auto& v : variants) {
    VariantOutcome mean;
    for (auto seed : cfg.ablate_seeds) {
      const auto o = run_variant(cfg, v, seed);
      runs << v.name << ',' << seed << ',' << num(o.sft_accuracy) << ',' << num(o.sft_iou) << ','
           << num(o.rl_accuracy) << ',' << num(o.rl_iou) << ',' << num(o.first_reward) << ','
           << num(o.last_reward) << '\n';
      log << "ablate " << v.name << " seed " << seed << " rl accuracy " << o.rl_accuracy << " iou " << o.rl_iou
          << '\n';
      mean.sft_accuracy += o.sft_accuracy;
      mean.sft_iou += o.sft_iou;
      mean.rl_accuracy += o.rl_accuracy;
      mean.rl_iou += o.rl_iou;
      mean.first_reward += o.first_reward;
      mean.last_reward += o.last_reward;
    }
    const double n = static_cast<double>(cfg.ablate_seeds.size());
    table << v.name << ',' << to_string(v.family) << ',' << to_string(v.sharing) << ',' << to_string(v.loss)
          << ',' << cfg.ablate_seeds.size() << ',' << num(mean.sft_accuracy / n) << ',' << num(mean.sft_iou / n)
          << ',' << num(mean.rl_accuracy / n) << ',' << num(mean.rl_iou / n) << ','
          << num(mean.first_reward / n) << ',' << num(mean.last_reward / n) << '\n';
  }
}

}  // namespace detail

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"loss_family", "sharing", "lambda", "baseline"};
  return axes;
}

/// Returns kSuccess when the axis can run with this config, else reports why.
inline int check_ablation(const Config& cfg, const std::string& axis, std::ostream& err) {
  if (std::find(ablation_axes().begin(), ablation_axes().end(), axis) == ablation_axes().end()) {
    err << "config error: unknown ablation axis '" << axis << "' (expected loss_family|sharing|lambda|baseline)\n";
    return kConfigError;
  }
  if (axis == "baseline" && cfg.ablate_seeds.size() < 2) {
    err << "warning: the baseline comparison needs at least 2 seeds (ablate.seeds has "
        << cfg.ablate_seeds.size() << "); nothing was run\n";
    return kConfigError;
  }
  return kSuccess;
}

inline int cmd_ablate(const Config& cfg, const std::string& axis, std::ostream& log, std::ostream& err) {
  if (const int rc = check_ablation(cfg, axis, err); rc != kSuccess) return rc;
  detail::write_snapshot(cfg);
  auto table = detail::open_out(cfg, "ablate_" + axis + ".csv");
  if (axis == "loss_family" || axis == "sharing") {
    std::vector<detail::PolicyVariant> variants;
    if (axis == "loss_family") {
      for (Family f : {Family::gaussian, Family::laplace})
        variants.push_back({to_string(f) + "_" + to_string(detail::paired_loss(f)), f, cfg.policy.sharing,
                            detail::paired_loss(f)});
    } else {
      for (Sharing s : {Sharing::shared, Sharing::independent})
        for (Family f : {Family::gaussian, Family::laplace})
          variants.push_back({to_string(f) + "_" + to_string(s), f, s, detail::paired_loss(f)});
    }
    auto runs = detail::open_out(cfg, "ablate_" + axis + "_runs.csv");
    detail::policy_ablation(cfg, variants, table, runs, log);
  } else if (axis == "lambda") {
    table << "lambda,seeds,final_loss,accuracy,mean_iou\n";
    std::vector<LambdaRow> mean(cfg.ablate_lambdas.size());
    for (auto seed : cfg.ablate_seeds) {
      Config c = cfg;
      c.seed = seed;
      const auto rows = lambda_sweep(detail::sft_run(c), cfg.ablate_lambdas);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        mean[i].final_loss += rows[i].final_loss;
        mean[i].accuracy += rows[i].accuracy;
        mean[i].mean_iou += rows[i].mean_iou;
      }
      log << "ablate lambda seed " << seed << " done\n";
    }
    const double n = static_cast<double>(cfg.ablate_seeds.size());
    for (std::size_t i = 0; i < mean.size(); ++i)
      table << detail::num(cfg.ablate_lambdas[i]) << ',' << cfg.ablate_seeds.size() << ','
            << detail::num(mean[i].final_loss / n) << ',' << detail::num(mean[i].accuracy / n) << ','
            << detail::num(mean[i].mean_iou / n) << '\n';
  } else {
    SftRun base = detail::sft_run(cfg);
    base.sft.eval_interval = cfg.ablate_eval_interval;
    const auto rows = convergence_compare(base, cfg.ablate_seeds,
                                          {cfg.ablate_iou_threshold, cfg.ablate_accuracy_threshold});
    table << "seed,coords,steps_to_iou,steps_to_accuracy,steps_run,final_iou,final_accuracy\n";
    for (const auto& r : rows)
      table << r.seed << ',' << to_string(r.coords) << ',' << steps_field(r.steps_to_iou) << ','
            << steps_field(r.steps_to_accuracy) << ',' << r.steps_run << ',' << detail::num(r.final_iou) << ','
            << detail::num(r.final_accuracy) << '\n';
  }
  log << "ablate " << axis << ": table written to " << detail::out_path(cfg, "ablate_" + axis + ".csv").string()
      << '\n';
  return kSuccess;
}

// ---------------------------------------------------------------------------

struct Invocation {
  std::string command;  // verify | sft | rl | eval | ablate
  Overrides overrides;
  bool skip_verify = false;
  std::string checkpoint;
  std::string axis;
};

/// Resolves the config, gates training commands on the verify suites, and
/// maps errors to exit codes.
inline int run(const Invocation& inv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  Config cfg;
  try {
    cfg = resolve_config(inv.overrides);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  try {
    if (inv.command == "verify") return cmd_verify(cfg, log);
    if (inv.command == "eval") return cmd_eval(cfg, inv.checkpoint, log);
    const bool training = inv.command == "sft" || inv.command == "rl" || inv.command == "ablate";
    if (!training) {
      err << "unknown command '" << inv.command << "'\n";
      return kConfigError;
    }
    if (inv.command == "ablate")
      if (const int rc = check_ablation(cfg, inv.axis, err); rc != kSuccess) return rc;
    if (!inv.skip_verify && cmd_verify(cfg, log) != kSuccess) {
      err << "verification failed; refusing to train (use --skip-verify to override)\n";
      return kFailure;
    }
    if (inv.command == "sft") return cmd_sft(cfg, log);
    if (inv.command == "rl") return cmd_rl(cfg, log);
    return cmd_ablate(cfg, inv.axis, log, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kConfigError;
  } catch (const TrainingDiverged& e) {
    err << "training diverged: " << e.what() << '\n';
    return kFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace coordrl::cli
