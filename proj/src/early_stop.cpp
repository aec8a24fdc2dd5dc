#include "komet/early_stop.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "komet/errors.hpp"

namespace komet {

EarlyStopDecision early_stop_update(EarlyStopState& state, double eval_loss, int patience, double threshold) {
  if (!std::isfinite(eval_loss)) throw ContractError("early_stop_update: eval loss is not finite");
  if (state.best_eval_loss - eval_loss > threshold) {
    state.epochs_without_improvement = 0;
  } else {
    state.epochs_without_improvement += 1;
  }
  state.best_eval_loss = std::min(state.best_eval_loss, eval_loss);
  return state.epochs_without_improvement >= patience ? EarlyStopDecision::kStop : EarlyStopDecision::kContinue;
}

}  // namespace komet
