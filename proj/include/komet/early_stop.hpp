#pragma once

#include <limits>

namespace komet {

struct EarlyStopState {
  double best_eval_loss = std::numeric_limits<double>::infinity();
  int epochs_without_improvement = 0;
};

enum class EarlyStopDecision { kContinue, kStop };

// Improvement means best - current > threshold (a drop of exactly threshold
// does not count) and resets the counter; anything else increments it. best
// follows the running minimum either way, so a run of small drops never adds
// up to an improvement. Stops once the counter reaches patience.
EarlyStopDecision early_stop_update(EarlyStopState& state, double eval_loss, int patience, double threshold);

}  // namespace komet
