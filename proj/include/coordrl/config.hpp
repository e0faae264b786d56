#pragma once

// Run configuration: one flat key-value file.
//
//   # comment
//   env.grid = 8
//   policy.family = laplace
//   ablate.seeds = 0,1,2,3,4
//
// Every key has a default, unknown keys are rejected, and serialize() writes
// every key in a fixed order so a resolved snapshot reloads to the same values.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "coordrl/env/env.hpp"
#include "coordrl/grpo/grpo.hpp"
#include "coordrl/policy/network.hpp"
#include "coordrl/sft/sft.hpp"
#include "coordrl/verify/verify.hpp"

namespace coordrl {

struct Config {
  std::uint64_t seed = 0;
  std::string out = "out";
  EnvConfig env;
  PolicyConfig policy;
  SftConfig sft;
  RlConfig rl;
  std::string rl_init_checkpoint;  // empty: SFT warm start inside the RL command
  bool rl_dump_trajectories = false;
  std::size_t eval_tasks = 512;
  std::uint64_t eval_seed = 999;
  std::vector<std::uint64_t> ablate_seeds{0, 1, 2, 3, 4};
  std::vector<double> ablate_lambdas{0.1, 0.3, 0.5, 0.7, 0.9};
  double ablate_iou_threshold = 0.5;
  double ablate_accuracy_threshold = 0.9;
  std::size_t ablate_eval_interval = 50;
  VerifyOptions verify;

  void validate() const;
  friend bool operator==(const Config& a, const Config& b);
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError(key + ": expected a finite real, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

struct ConfigField {
  std::string key;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

template <class T>
ConfigField size_field(std::string key, T Config::*section, std::size_t T::*member) {
  return {key, [=](const Config& c) { return std::to_string(c.*section.*member); },
          [=](Config& c, const std::string& v) { c.*section.*member = parse_u64(key, v); }};
}

template <class T>
ConfigField real_field(std::string key, T Config::*section, double T::*member) {
  return {key, [=](const Config& c) { return format_double(c.*section.*member); },
          [=](Config& c, const std::string& v) { c.*section.*member = parse_double(key, v); }};
}

template <class E>
ConfigField enum_field(std::string key, std::function<E&(Config&)> ref, std::vector<E> values) {
  return {key,
          [=](const Config& c) { return to_string(ref(const_cast<Config&>(c))); },
          [=](Config& c, const std::string& v) {
            for (E e : values)
              if (to_string(e) == v) {
                ref(c) = e;
                return;
              }
            std::string allowed;
            for (E e : values) allowed += (allowed.empty() ? "" : "|") + to_string(e);
            throw ConfigError(key + ": expected one of " + allowed + ", got '" + v + "'");
          }};
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    f.push_back({"seed", [](const Config& c) { return std::to_string(c.seed); },
                 [](Config& c, const std::string& v) { c.seed = parse_u64("seed", v); }});
    f.push_back({"out", [](const Config& c) { return c.out; },
                 [](Config& c, const std::string& v) { c.out = v; }});

    f.push_back(size_field("env.grid", &Config::env, &EnvConfig::grid));
    f.push_back(size_field("env.attributes", &Config::env, &EnvConfig::attributes));
    f.push_back(size_field("env.query_kinds", &Config::env, &EnvConfig::query_kinds));
    f.push_back(real_field("env.target_min", &Config::env, &EnvConfig::target_min));
    f.push_back(real_field("env.target_max", &Config::env, &EnvConfig::target_max));
    f.push_back(real_field("env.area_cap", &Config::env, &EnvConfig::area_cap));
    f.push_back(size_field("env.max_zoom_calls", &Config::env, &EnvConfig::max_zoom_calls));
    f.push_back(size_field("env.max_steps", &Config::env, &EnvConfig::max_steps));

    f.push_back(enum_field<Family>("policy.family", [](Config& c) -> Family& { return c.policy.family; },
                                   {Family::gaussian, Family::laplace}));
    f.push_back(enum_field<Sharing>("policy.sharing", [](Config& c) -> Sharing& { return c.policy.sharing; },
                                    {Sharing::shared, Sharing::independent}));
    f.push_back(enum_field<CoordMode>("policy.coords", [](Config& c) -> CoordMode& { return c.policy.coords; },
                                      {CoordMode::continuous, CoordMode::quantized}));
    f.push_back(size_field("policy.hidden", &Config::policy, &PolicyConfig::hidden));
    f.push_back(size_field("policy.layers", &Config::policy, &PolicyConfig::layers));
    f.push_back(real_field("policy.epsilon_floor", &Config::policy, &PolicyConfig::epsilon_floor));
    f.push_back(real_field("policy.init_dispersion", &Config::policy, &PolicyConfig::init_dispersion));
    f.push_back(size_field("policy.bins", &Config::policy, &PolicyConfig::bins));

    f.push_back({"sft.lambda", [](const Config& c) { return format_double(c.sft.loss.lambda); },
                 [](Config& c, const std::string& v) { c.sft.loss.lambda = parse_double("sft.lambda", v); }});
    f.push_back(enum_field<CoordLoss>("sft.coord_loss", [](Config& c) -> CoordLoss& { return c.sft.loss.coord_loss; },
                                      {CoordLoss::l2sq, CoordLoss::l1}));
    f.push_back({"sft.l1_weight", [](const Config& c) { return format_double(c.sft.loss.l1_weight); },
                 [](Config& c, const std::string& v) { c.sft.loss.l1_weight = parse_double("sft.l1_weight", v); }});
    f.push_back(real_field("sft.lr", &Config::sft, &SftConfig::lr));
    f.push_back(size_field("sft.steps", &Config::sft, &SftConfig::steps));
    f.push_back(size_field("sft.batch", &Config::sft, &SftConfig::batch));
    f.push_back(enum_field<Schedule>("sft.schedule", [](Config& c) -> Schedule& { return c.sft.schedule; },
                                     {Schedule::constant, Schedule::cosine}));
    f.push_back(size_field("sft.eval_interval", &Config::sft, &SftConfig::eval_interval));

    f.push_back(size_field("rl.group_size", &Config::rl, &RlConfig::group_size));
    f.push_back(real_field("rl.clip_eps", &Config::rl, &RlConfig::clip_eps));
    f.push_back(real_field("rl.beta", &Config::rl, &RlConfig::beta));
    f.push_back({"rl.w_acc", [](const Config& c) { return format_double(c.rl.weights.accuracy); },
                 [](Config& c, const std::string& v) { c.rl.weights.accuracy = parse_double("rl.w_acc", v); }});
    f.push_back({"rl.w_fmt", [](const Config& c) { return format_double(c.rl.weights.format); },
                 [](Config& c, const std::string& v) { c.rl.weights.format = parse_double("rl.w_fmt", v); }});
    f.push_back({"rl.w_zoom", [](const Config& c) { return format_double(c.rl.weights.zoom); },
                 [](Config& c, const std::string& v) { c.rl.weights.zoom = parse_double("rl.w_zoom", v); }});
    f.push_back(size_field("rl.iterations", &Config::rl, &RlConfig::iterations));
    f.push_back(size_field("rl.inner_steps", &Config::rl, &RlConfig::inner_steps));
    f.push_back(size_field("rl.tasks_per_iteration", &Config::rl, &RlConfig::tasks_per_iteration));
    f.push_back(real_field("rl.lr", &Config::rl, &RlConfig::lr));
    f.push_back(real_field("rl.degeneracy_eps", &Config::rl, &RlConfig::degeneracy_eps));
    f.push_back(size_field("rl.eval_interval", &Config::rl, &RlConfig::eval_interval));
    f.push_back(size_field("rl.warmup_sft_steps", &Config::rl, &RlConfig::warmup_sft_steps));
    f.push_back({"rl.init_checkpoint", [](const Config& c) { return c.rl_init_checkpoint; },
                 [](Config& c, const std::string& v) { c.rl_init_checkpoint = v; }});
    f.push_back({"rl.dump_trajectories", [](const Config& c) { return std::string(c.rl_dump_trajectories ? "true" : "false"); },
                 [](Config& c, const std::string& v) { c.rl_dump_trajectories = parse_bool("rl.dump_trajectories", v); }});

    f.push_back({"eval.tasks", [](const Config& c) { return std::to_string(c.eval_tasks); },
                 [](Config& c, const std::string& v) { c.eval_tasks = parse_u64("eval.tasks", v); }});
    f.push_back({"eval.seed", [](const Config& c) { return std::to_string(c.eval_seed); },
                 [](Config& c, const std::string& v) { c.eval_seed = parse_u64("eval.seed", v); }});

    f.push_back({"ablate.seeds",
                 [](const Config& c) {
                   std::string s;
                   for (auto v : c.ablate_seeds) s += (s.empty() ? "" : ",") + std::to_string(v);
                   return s;
                 },
                 [](Config& c, const std::string& v) {
                   c.ablate_seeds.clear();
                   for (const auto& item : split_list(v)) c.ablate_seeds.push_back(parse_u64("ablate.seeds", item));
                 }});
    f.push_back({"ablate.lambdas",
                 [](const Config& c) {
                   std::string s;
                   for (auto v : c.ablate_lambdas) s += (s.empty() ? "" : ",") + format_double(v);
                   return s;
                 },
                 [](Config& c, const std::string& v) {
                   c.ablate_lambdas.clear();
                   for (const auto& item : split_list(v))
                     c.ablate_lambdas.push_back(parse_double("ablate.lambdas", item));
                 }});
    f.push_back({"ablate.iou_threshold", [](const Config& c) { return format_double(c.ablate_iou_threshold); },
                 [](Config& c, const std::string& v) { c.ablate_iou_threshold = parse_double("ablate.iou_threshold", v); }});
    f.push_back({"ablate.accuracy_threshold", [](const Config& c) { return format_double(c.ablate_accuracy_threshold); },
                 [](Config& c, const std::string& v) {
                   c.ablate_accuracy_threshold = parse_double("ablate.accuracy_threshold", v);
                 }});
    f.push_back({"ablate.eval_interval", [](const Config& c) { return std::to_string(c.ablate_eval_interval); },
                 [](Config& c, const std::string& v) { c.ablate_eval_interval = parse_u64("ablate.eval_interval", v); }});

    f.push_back(real_field("verify.ratio_tol", &Config::verify, &VerifyOptions::ratio_tol));
    f.push_back(real_field("verify.reduction_tol", &Config::verify, &VerifyOptions::reduction_tol));
    f.push_back(real_field("verify.kl_max_se", &Config::verify, &VerifyOptions::kl_max_se));
    f.push_back(real_field("verify.ks_alpha", &Config::verify, &VerifyOptions::ks_alpha));
    f.push_back(real_field("verify.variance_band", &Config::verify, &VerifyOptions::variance_band));
    f.push_back(real_field("verify.grad_tol", &Config::verify, &VerifyOptions::grad_tol));
    return f;
  }();
  return fields;
}

}  // namespace detail

inline void Config::validate() const {
  env.validate();
  sft.validate();
  rl.validate();
  if (policy.hidden < 1) throw ConfigError("policy.hidden must be >= 1");
  if (policy.layers < 1) throw ConfigError("policy.layers must be >= 1");
  if (!(policy.epsilon_floor > 0.0)) throw ConfigError("policy.epsilon_floor must be > 0");
  if (!(policy.init_dispersion >= policy.epsilon_floor))
    throw ConfigError("policy.init_dispersion must be >= policy.epsilon_floor");
  if (policy.bins < 2) throw ConfigError("policy.bins must be >= 2");
  if (rl.weights.accuracy < 0.0 || rl.weights.format < 0.0 || rl.weights.zoom < 0.0)
    throw ConfigError("rl reward weights must be >= 0");
  if (eval_tasks < 1) throw ConfigError("eval.tasks must be >= 1");
  if (out.empty()) throw ConfigError("out must not be empty");
  if (ablate_seeds.empty()) throw ConfigError("ablate.seeds must list at least one seed");
  if (std::set<std::uint64_t>(ablate_seeds.begin(), ablate_seeds.end()).size() != ablate_seeds.size())
    throw ConfigError("ablate.seeds must not repeat");
  if (ablate_lambdas.empty()) throw ConfigError("ablate.lambdas must list at least one value");
  for (double l : ablate_lambdas)
    if (!(l > 0.0)) throw ConfigError("ablate.lambdas must be > 0");
  if (!(ablate_iou_threshold > 0.0 && ablate_iou_threshold <= 1.0))
    throw ConfigError("ablate.iou_threshold must be in (0, 1]");
  if (!(ablate_accuracy_threshold > 0.0 && ablate_accuracy_threshold <= 1.0))
    throw ConfigError("ablate.accuracy_threshold must be in (0, 1]");
  if (ablate_eval_interval < 1) throw ConfigError("ablate.eval_interval must be >= 1");
  for (double t : {verify.ratio_tol, verify.reduction_tol, verify.kl_max_se, verify.ks_alpha,
                   verify.variance_band, verify.grad_tol})
    if (!(t > 0.0)) throw ConfigError("verify tolerances must be > 0");
}

/// Sets one key; throws ConfigError for unknown keys or bad values.
inline void set_config_value(Config& c, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields())
    if (f.key == key) {
      f.set(c, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const Config& c, const std::string& key) {
  for (const auto& f : detail::config_fields())
    if (f.key == key) return f.get(c);
  throw ConfigError("unknown config key '" + key + "'");
}

inline void serialize_config(std::ostream& os, const Config& c) {
  for (const auto& f : detail::config_fields()) os << f.key << " = " << f.get(c) << '\n';
}

inline std::string serialize_config(const Config& c) {
  std::ostringstream os;
  serialize_config(os, c);
  return os.str();
}

inline bool operator==(const Config& a, const Config& b) { return serialize_config(a) == serialize_config(b); }

/// Parses `key = value` lines over the defaults. Does not validate ranges.
inline Config parse_config(std::istream& is, const std::string& origin = "config") {
  Config c;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      set_config_value(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return c;
}

inline Config parse_config(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

inline Config load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(is, path);
}

}  // namespace coordrl
