#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "komet/tensor.hpp"

namespace komet::testing {

template <typename Scalar>
Tensor<Scalar> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  typename Tensor<Scalar>::Array v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(dist(rng));
  return Tensor<Scalar>(std::move(shape), std::move(v), requires_grad);
}

template <typename Scalar>
std::vector<double> to_vector(const Tensor<Scalar>& t) {
  std::vector<double> out;
  for (Index i = 0; i < t.size(); ++i) out.push_back(static_cast<double>(t.values()[i]));
  return out;
}

// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("komet-" + tag + "-" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace komet::testing
