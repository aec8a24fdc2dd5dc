#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "komet/tensor.hpp"

namespace komet {

// Checks reverse-mode gradients against central differences at steps h and
// h/2, Richardson-combined so the truncation error is O(h^4). `loss`
// rebuilds the scalar objective from the current parameter values. Returns
// the maximum relative error max|a - n| / max(|a|, |n|, 1e-8) over every
// coordinate of every parameter; a NaN anywhere is reported as +inf.
template <typename Scalar>
double grad_check(const std::function<Tensor<Scalar>()>& loss, std::span<Tensor<Scalar>> params, double h) {
  for (auto& p : params) p.zero_grad();
  loss().backward();
  std::vector<typename Tensor<Scalar>::Array> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    analytic.push_back(p.has_grad() ? p.grad() : Tensor<Scalar>::Array::Zero(p.size()));
  }

  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& values = params[k].mutable_values();
    for (Index i = 0; i < values.size(); ++i) {
      const Scalar saved = values[i];
      auto central = [&](double step) {
        values[i] = static_cast<Scalar>(static_cast<double>(saved) + step);
        const double up = static_cast<double>(loss().item());
        values[i] = static_cast<Scalar>(static_cast<double>(saved) - step);
        const double down = static_cast<double>(loss().item());
        values[i] = saved;
        return (up - down) / (2.0 * step);
      };
      const double numeric = (4.0 * central(0.5 * h) - central(h)) / 3.0;
      const double a = static_cast<double>(analytic[k][i]);
      if (!std::isfinite(numeric) || !std::isfinite(a)) return std::numeric_limits<double>::infinity();
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

// Single-input form: f maps x to a scalar tensor.
template <typename Scalar>
double grad_check(const std::function<Tensor<Scalar>(const Tensor<Scalar>&)>& f, Tensor<Scalar> x, double h) {
  x.set_requires_grad(true);
  std::vector<Tensor<Scalar>> params{x};
  return grad_check<Scalar>([&f, &x]() { return f(x); }, std::span<Tensor<Scalar>>(params), h);
}

}  // namespace komet
