#pragma once

// Synthetic "needle in a grid" zoom-in environment.
//
// An N x N grid hides one rectangular target region. The base view shows where
// the target is (cell occupancy) but not what it is. A crop reveals the
// queried attribute of the target only when it is *readable*: the target's
// center lies inside the crop and the crop covers at most `area_cap` of the
// image. Degenerate crops are legal and never readable.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "coordrl/policy/coord_policy.hpp"
#include "coordrl/policy/vocab.hpp"
#include "coordrl/rng.hpp"

namespace coordrl {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct EnvConfig {
  std::size_t grid = 8;
  std::size_t attributes = 4;
  std::size_t query_kinds = 2;
  double target_min = 0.125;  // side length range, normalized
  double target_max = 0.25;
  double area_cap = 0.25;
  std::size_t max_zoom_calls = 1;
  std::size_t max_steps = 2;

  /// Side lengths in cells admitted by [target_min, target_max].
  std::size_t min_cells() const {
    return static_cast<std::size_t>(std::ceil(target_min * static_cast<double>(grid) - 1e-9));
  }
  std::size_t max_cells() const {
    return static_cast<std::size_t>(std::floor(target_max * static_cast<double>(grid) + 1e-9));
  }

  void validate() const {
    if (grid < 4) throw ConfigError("env.grid must be >= 4");
    if (attributes < 2) throw ConfigError("env.attributes must be >= 2");
    if (query_kinds < 1) throw ConfigError("env.query_kinds must be >= 1");
    if (!(target_min > 0.0) || target_max < target_min)
      throw ConfigError("env.target_min/target_max must satisfy 0 < min <= max");
    const auto lo = std::max<std::size_t>(min_cells(), 1), hi = max_cells();
    // Targets stay off the image border, so at most grid - 2 cells per side.
    if (lo > hi || hi > grid - 2)
      throw ConfigError("env target size range admits no cell-aligned target strictly inside the image");
    if (!(area_cap > 0.0) || area_cap > 1.0) throw ConfigError("env.area_cap must be in (0, 1]");
    if (target_max * target_max > area_cap)
      throw ConfigError("env.area_cap must admit the largest target (target_max^2 <= area_cap)");
    if (max_zoom_calls < 1) throw ConfigError("env.max_zoom_calls must be >= 1");
    if (max_steps < 1) throw ConfigError("env.max_steps must be >= 1");
  }

  Vocabulary vocab() const { return Vocabulary{attributes}; }

  /// Length of one Observation feature vector.
  std::size_t observation_dim() const { return 1 + grid * grid + 2 * grid + attributes + kBoxDims; }
  /// Length of the policy input built from an episode state.
  std::size_t context_dim() const { return query_kinds + 2 * observation_dim() + 1; }
};

struct CellRect {
  std::size_t col0 = 0, row0 = 0, col1 = 0, row1 = 0;  // half-open [col0, col1) x [row0, row1)
  friend bool operator==(const CellRect&, const CellRect&) = default;
};

struct Task {
  std::uint64_t id = 0;
  std::size_t grid = 0;
  std::size_t attributes = 0;
  std::size_t query_kinds = 1;
  std::size_t query_kind = 0;
  /// cells[kind][row * grid + col]: attribute id of each cell for each property kind.
  std::vector<std::vector<std::size_t>> cells;
  CellRect target_cells;
  BoxAction target;  // normalized [x1, y1, x2, y2]
  std::vector<std::size_t> target_attributes;  // per kind
  std::size_t answer = 0;                      // 0-based attribute of the queried kind

  std::vector<double> query_encoding() const {
    std::vector<double> q(query_kinds, 0.0);
    q[query_kind] = 1.0;
    return q;
  }

  friend bool operator==(const Task&, const Task&) = default;
};

inline double box_area(const BoxAction& b) {
  return std::max(0.0, b[2] - b[0]) * std::max(0.0, b[3] - b[1]);
}

inline Task new_task(Rng& rng, const EnvConfig& cfg, std::uint64_t id = 0) {
  cfg.validate();
  const std::size_t n = cfg.grid;
  const std::size_t lo = std::max<std::size_t>(cfg.min_cells(), 1), hi = cfg.max_cells();
  std::uniform_int_distribution<std::size_t> side(lo, hi);
  Task t;
  t.id = id;
  t.grid = n;
  t.attributes = cfg.attributes;
  t.query_kinds = cfg.query_kinds;
  const std::size_t w = side(rng), h = side(rng);
  t.target_cells.col0 = std::uniform_int_distribution<std::size_t>(1, n - 1 - w)(rng);
  t.target_cells.row0 = std::uniform_int_distribution<std::size_t>(1, n - 1 - h)(rng);
  t.target_cells.col1 = t.target_cells.col0 + w;
  t.target_cells.row1 = t.target_cells.row0 + h;
  const double dn = static_cast<double>(n);
  t.target = BoxAction{{t.target_cells.col0 / dn, t.target_cells.row0 / dn,
                        t.target_cells.col1 / dn, t.target_cells.row1 / dn}};
  t.query_kind = std::uniform_int_distribution<std::size_t>(0, cfg.query_kinds - 1)(rng);
  std::uniform_int_distribution<std::size_t> attr(0, cfg.attributes - 1);
  t.cells.assign(cfg.query_kinds, std::vector<std::size_t>(n * n));
  t.target_attributes.resize(cfg.query_kinds);
  for (std::size_t k = 0; k < cfg.query_kinds; ++k) {
    for (auto& c : t.cells[k]) c = attr(rng);
    t.target_attributes[k] = attr(rng);
    for (std::size_t r = t.target_cells.row0; r < t.target_cells.row1; ++r)
      for (std::size_t c = t.target_cells.col0; c < t.target_cells.col1; ++c)
        t.cells[k][r * n + c] = t.target_attributes[k];
  }
  t.answer = t.target_attributes[t.query_kind];
  return t;
}

/// A fixed, seed-determined set of tasks (ids 0..n-1).
inline std::vector<Task> make_task_set(std::uint64_t seed, std::size_t n, const EnvConfig& cfg) {
  std::vector<Task> tasks;
  tasks.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, {0x7a5c, i});
    tasks.push_back(new_task(rng, cfg, i));
  }
  return tasks;
}

/// Sorts each axis so x1 <= x2, y1 <= y2, then clamps into [0, 1].
inline BoxAction canonicalize_box(const BoxAction& raw) {
  BoxAction b;
  b[0] = std::clamp(std::min(raw[0], raw[2]), 0.0, 1.0);
  b[2] = std::clamp(std::max(raw[0], raw[2]), 0.0, 1.0);
  b[1] = std::clamp(std::min(raw[1], raw[3]), 0.0, 1.0);
  b[3] = std::clamp(std::max(raw[1], raw[3]), 0.0, 1.0);
  return b;
}

/// Intersection over union of two boxes (canonicalized first); 0 when the union is empty.
inline double iou(const BoxAction& a_raw, const BoxAction& b_raw) {
  const BoxAction a = canonicalize_box(a_raw), b = canonicalize_box(b_raw);
  const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
  const double uni = box_area(a) + box_area(b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline bool is_readable(const Task& task, const BoxAction& canonical_crop, const EnvConfig& cfg) {
  const double area = box_area(canonical_crop);
  if (!(area > 0.0) || area > cfg.area_cap) return false;
  const double cx = 0.5 * (task.target[0] + task.target[2]);
  const double cy = 0.5 * (task.target[1] + task.target[3]);
  return canonical_crop[0] <= cx && cx <= canonical_crop[2] && canonical_crop[1] <= cy &&
         cy <= canonical_crop[3];
}

struct Scope {
  bool crop = false;
  BoxAction box;  // crop region, used only when crop is set

  static Scope base() { return {}; }
  static Scope crop_of(const BoxAction& b) { return {true, b}; }
};

struct Observation {
  bool crop = false;
  BoxAction box;  // canonical crop box
  bool readable = false;
  std::vector<double> features;

  friend bool operator==(const Observation&, const Observation&) = default;
};

/// Feature layout (length EnvConfig::observation_dim()):
///   [0]                 1 for a crop, 0 for the base view
///   [1, 1+N*N)          target occupancy map (base view only)
///   [.., +N)            row occupancy, [.., +N) column occupancy (base view only)
///   [.., +K)            one-hot of the queried attribute (readable crops only)
///   [.., +4)            canonical crop geometry (crops only)
inline Observation featurize(const Task& task, const EnvConfig& cfg, const Scope& scope) {
  const std::size_t n = cfg.grid;
  Observation obs;
  obs.features.assign(cfg.observation_dim(), 0.0);
  auto& f = obs.features;
  const std::size_t occ = 1, rows = occ + n * n, cols = rows + n, attr = cols + n,
                    geom = attr + cfg.attributes;
  if (!scope.crop) {
    for (std::size_t r = task.target_cells.row0; r < task.target_cells.row1; ++r) {
      f[rows + r] = 1.0;
      for (std::size_t c = task.target_cells.col0; c < task.target_cells.col1; ++c)
        f[occ + r * n + c] = 1.0;
    }
    for (std::size_t c = task.target_cells.col0; c < task.target_cells.col1; ++c) f[cols + c] = 1.0;
    return obs;
  }
  obs.crop = true;
  obs.box = canonicalize_box(scope.box);
  obs.readable = is_readable(task, obs.box, cfg);
  f[0] = 1.0;
  if (obs.readable) f[attr + task.answer] = 1.0;
  for (std::size_t j = 0; j < kBoxDims; ++j) f[geom + j] = obs.box[j];
  return obs;
}

inline Observation apply_zoom(const Task& task, const EnvConfig& cfg, const BoxAction& raw) {
  return featurize(task, cfg, Scope::crop_of(raw));
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeRecord {
  std::vector<std::size_t> tokens;
  std::vector<BoxAction> zoom_raw;
  std::vector<BoxAction> zoom_canonical;
  std::optional<std::size_t> answer;
  bool readable_at_answer = false;
  bool invalid = false;    // PAD emitted, or ZOOM beyond the call budget
  bool truncated = false;  // ran out of steps without answering
};

struct Outcome {
  bool correct = false;
  bool grounded = false;  // answered while the attribute was readable
  std::size_t zoom_count = 0;
  bool format_valid = false;
  double last_iou = 0.0;

  friend bool operator==(const Outcome&, const Outcome&) = default;
};

/// Grades a finished episode: the answer is correct iff it names a*;
/// the format is valid iff exactly one ANSWER ends the episode within the
/// step budget with no invalid emission.
inline Outcome grade(const EpisodeRecord& rec, const Task& task, const EnvConfig& cfg) {
  Outcome o;
  o.zoom_count = rec.zoom_canonical.size();
  o.correct = rec.answer.has_value() && *rec.answer == task.answer;
  o.grounded = rec.answer.has_value() && rec.readable_at_answer;
  o.format_valid = rec.answer.has_value() && !rec.invalid && !rec.truncated &&
                   rec.tokens.size() <= cfg.max_steps;
  o.last_iou = o.zoom_count ? iou(rec.zoom_canonical.back(), task.target) : 0.0;
  return o;
}

class Episode {
 public:
  Episode(const Task& task, const EnvConfig& cfg)
      : task_(&task), cfg_(cfg), base_(featurize(task, cfg, Scope::base())) {}

  const Task& task() const { return *task_; }
  const EnvConfig& config() const { return cfg_; }
  bool done() const { return done_; }
  std::size_t zooms_used() const { return record_.zoom_canonical.size(); }
  const std::optional<Observation>& last_crop() const { return last_crop_; }
  const EpisodeRecord& record() const { return record_; }
  Outcome outcome() const { return grade(record_, *task_, cfg_); }

  /// Policy input: query, base view, latest crop view (zeros before the
  /// first zoom), and the fraction of the zoom budget already used.
  std::vector<double> context() const {
    std::vector<double> ctx = task_->query_encoding();
    ctx.reserve(cfg_.context_dim());
    ctx.insert(ctx.end(), base_.features.begin(), base_.features.end());
    if (last_crop_)
      ctx.insert(ctx.end(), last_crop_->features.begin(), last_crop_->features.end());
    else
      ctx.insert(ctx.end(), cfg_.observation_dim(), 0.0);
    ctx.push_back(static_cast<double>(zooms_used()) / static_cast<double>(cfg_.max_zoom_calls));
    return ctx;
  }

  /// Applies one emitted token; ZOOM must carry the coordinate action.
  void step(std::size_t token, std::optional<BoxAction> zoom_box = std::nullopt) {
    if (done_) throw std::logic_error("step on a finished episode");
    const Vocabulary vocab = cfg_.vocab();
    record_.tokens.push_back(token);
    if (token == Vocabulary::zoom) {
      if (!zoom_box) throw std::invalid_argument("ZOOM step requires a box");
      if (zooms_used() < cfg_.max_zoom_calls) {
        last_crop_ = apply_zoom(*task_, cfg_, *zoom_box);
        record_.zoom_raw.push_back(*zoom_box);
        record_.zoom_canonical.push_back(last_crop_->box);
      } else {
        record_.invalid = true;
        done_ = true;
      }
    } else if (auto k = vocab.answer_index(token)) {
      record_.answer = *k;
      record_.readable_at_answer = last_crop_ && last_crop_->readable;
      done_ = true;
    } else {
      record_.invalid = true;
      done_ = true;
    }
    if (!done_ && record_.tokens.size() >= cfg_.max_steps) {
      record_.truncated = true;
      done_ = true;
    }
  }

  /// Ends the episode as truncated and format-invalid (failed environment step).
  void abort() {
    record_.invalid = true;
    record_.truncated = true;
    done_ = true;
  }

 private:
  const Task* task_;
  EnvConfig cfg_;
  Observation base_;
  std::optional<Observation> last_crop_;
  EpisodeRecord record_;
  bool done_ = false;
};

// ---------------------------------------------------------------------------
// Supervised data

enum class PositionKind { token, coord };

/// One supervised decoding position. Token positions carry the target token;
/// coordinate positions carry the target box and share the context of the
/// ZOOM token emitted from the same hidden state.
struct SftPosition {
  PositionKind kind = PositionKind::token;
  std::vector<double> context;
  std::size_t token = 0;
  BoxAction target_box;
};

struct SftExample {
  Task task;
  std::vector<SftPosition> positions;
};

/// Supervised trajectory ZOOM(b*), ANSWER(a*) for one task.
inline SftExample make_sft_example(const Task& task, const EnvConfig& cfg) {
  SftExample ex;
  ex.task = task;
  Episode ep(ex.task, cfg);
  const auto ctx0 = ep.context();
  ex.positions.push_back({PositionKind::token, ctx0, Vocabulary::zoom, {}});
  ex.positions.push_back({PositionKind::coord, ctx0, 0, task.target});
  ep.step(Vocabulary::zoom, task.target);
  const std::size_t answer_token = cfg.vocab().answer(task.answer);
  ex.positions.push_back({PositionKind::token, ep.context(), answer_token, {}});
  return ex;
}

inline std::vector<SftExample> gen_sft_dataset(std::size_t n, Rng& rng, const EnvConfig& cfg,
                                               std::uint64_t first_id = 0) {
  if (n < 1) throw std::invalid_argument("gen_sft_dataset: n must be >= 1");
  std::vector<SftExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_sft_example(new_task(rng, cfg, first_id + i), cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Task records
//
//   task id=<u64> grid=<N> attributes=<K> kinds=<Q> query=<q> target=<c0>,<r0>,<c1>,<r1>
//        answer=<a> targets=<t_0>,...,<t_Q-1> cells=<kind0 ids, comma separated>;<kind1 ...>
//
// One line per task, fields space separated, cell ids row-major, all 0-based.

inline std::string serialize_task(const Task& t) {
  std::ostringstream os;
  os << "task id=" << t.id << " grid=" << t.grid << " attributes=" << t.attributes
     << " kinds=" << t.query_kinds << " query=" << t.query_kind << " target=" << t.target_cells.col0
     << ',' << t.target_cells.row0 << ',' << t.target_cells.col1 << ',' << t.target_cells.row1
     << " answer=" << t.answer << " targets=";
  for (std::size_t k = 0; k < t.target_attributes.size(); ++k)
    os << (k ? "," : "") << t.target_attributes[k];
  os << " cells=";
  for (std::size_t k = 0; k < t.cells.size(); ++k) {
    if (k) os << ';';
    for (std::size_t i = 0; i < t.cells[k].size(); ++i) os << (i ? "," : "") << t.cells[k][i];
  }
  return os.str();
}

inline Task parse_task(const std::string& line) {
  std::istringstream is(line);
  std::string tag;
  if (!(is >> tag) || tag != "task") throw std::invalid_argument("not a task record");
  Task t;
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(s);
    while (std::getline(ss, cur, sep)) out.push_back(cur);
    return out;
  };
  auto to_size = [](const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); };
  std::string field;
  while (is >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("bad task field: " + field);
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "id") t.id = std::stoull(value);
    else if (key == "grid") t.grid = to_size(value);
    else if (key == "attributes") t.attributes = to_size(value);
    else if (key == "kinds") t.query_kinds = to_size(value);
    else if (key == "query") t.query_kind = to_size(value);
    else if (key == "answer") t.answer = to_size(value);
    else if (key == "target") {
      const auto v = split(value, ',');
      if (v.size() != 4) throw std::invalid_argument("bad target field");
      t.target_cells = {to_size(v[0]), to_size(v[1]), to_size(v[2]), to_size(v[3])};
    } else if (key == "targets") {
      for (const auto& s : split(value, ',')) t.target_attributes.push_back(to_size(s));
    } else if (key == "cells") {
      for (const auto& kind : split(value, ';')) {
        std::vector<std::size_t> ids;
        for (const auto& s : split(kind, ',')) ids.push_back(to_size(s));
        t.cells.push_back(std::move(ids));
      }
    } else {
      throw std::invalid_argument("unknown task field: " + key);
    }
  }
  const double dn = static_cast<double>(t.grid);
  t.target = BoxAction{{t.target_cells.col0 / dn, t.target_cells.row0 / dn, t.target_cells.col1 / dn,
                        t.target_cells.row1 / dn}};
  if (t.cells.size() != t.query_kinds || t.target_attributes.size() != t.query_kinds ||
      t.query_kind >= t.query_kinds)
    throw std::invalid_argument("inconsistent task record");
  for (const auto& k : t.cells)
    if (k.size() != t.grid * t.grid) throw std::invalid_argument("task cells do not match grid");
  return t;
}

}  // namespace coordrl
