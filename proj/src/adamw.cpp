#include "komet/adamw.hpp"

#include <cmath>

#include "komet/errors.hpp"
#include "komet/log.hpp"

namespace komet {

void validate(const AdamWConfig& cfg) {
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0)) throw ConfigError("trainer.adam_beta1 must lie in [0, 1)");
  if (!(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) throw ConfigError("trainer.adam_beta2 must lie in [0, 1)");
  if (!(cfg.eps > 0.0)) throw ConfigError("trainer.adam_epsilon must be > 0");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("trainer.weight_decay must be >= 0");
}

bool AdamWState::operator==(const AdamWState& other) const {
  if (t != other.t || m.size() != other.m.size() || v.size() != other.v.size()) return false;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i].size() != other.m[i].size() || !(m[i] == other.m[i]).all()) return false;
    if (v[i].size() != other.v[i].size() || !(v[i] == other.v[i]).all()) return false;
  }
  return true;
}

void adamw_step(const std::vector<NamedTensor<float>>& params, AdamWState& state, double lr) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    const auto& g = p.tensor.grad();
    for (Index i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        log::error("non-finite gradient ", g[i], " in ", p.name, "[", i, "] at optimizer step ", state.t + 1);
        throw TrainingAborted("non-finite gradient in " + p.name + "[" + std::to_string(i) + "] at step " +
                              std::to_string(state.t + 1));
      }
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Tensor<float>::Array::Zero(p.tensor.size()));
      state.v.push_back(Tensor<float>::Array::Zero(p.tensor.size()));
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adamw_step: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                        std::to_string(params.size()));
  }
  const auto& c = state.config;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<float> tensor = params[k].tensor;
    auto& values = tensor.mutable_values();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != values.size()) throw ContractError("adamw_step: moment shape mismatch for " + params[k].name);
    const bool has_grad = tensor.has_grad();
    const float* g = has_grad ? tensor.grad().data() : nullptr;
    for (Index i = 0; i < values.size(); ++i) {
      const double gi = has_grad ? static_cast<double>(g[i]) : 0.0;
      const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + c.eps) + c.weight_decay * static_cast<double>(values[i]);
      values[i] = static_cast<float>(static_cast<double>(values[i]) - lr * update);
    }
  }
}

}  // namespace komet
