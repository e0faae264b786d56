#pragma once

#include "coordrl/env/env.hpp"

namespace coordrl {

struct RewardWeights {
  double accuracy = 1.0;
  double format = 0.5;
  double zoom = 0.5;
};

struct RewardComponents {
  double accuracy = 0.0;
  double format = 0.0;
  double zoom = 0.0;
  double total = 0.0;

  friend bool operator==(const RewardComponents&, const RewardComponents&) = default;
};

/// Outcome reward: correctness + format validity + a zoom bonus that fires
/// only for correct trajectories that zoomed at least once.
inline RewardComponents compute_reward(const Outcome& o, const RewardWeights& w) {
  RewardComponents r;
  r.accuracy = o.correct ? w.accuracy : 0.0;
  r.format = o.format_valid ? w.format : 0.0;
  r.zoom = (o.correct && o.zoom_count >= 1) ? w.zoom : 0.0;
  r.total = r.accuracy + r.format + r.zoom;
  return r;
}

}  // namespace coordrl
