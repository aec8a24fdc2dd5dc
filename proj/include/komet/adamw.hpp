#pragma once

#include <cstdint>
#include <vector>

#include "komet/encoder.hpp"
#include "komet/tensor.hpp"

namespace komet {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

void validate(const AdamWConfig& cfg);

// Moments mirror the parameter list passed to adamw_step; t counts steps.
struct AdamWState {
  AdamWConfig config;
  std::int64_t t = 0;
  std::vector<Tensor<float>::Array> m;
  std::vector<Tensor<float>::Array> v;

  bool operator==(const AdamWState& other) const;
};

// Bias-corrected moments with decoupled decay:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
// A tensor without a gradient is treated as having a zero gradient. Any
// non-finite gradient throws TrainingAborted naming the tensor and index
// before anything is modified.
void adamw_step(const std::vector<NamedTensor<float>>& params, AdamWState& state, double lr);

}  // namespace komet
