#include <gtest/gtest.h>

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "komet/grad_check.hpp"
#include "komet/ops.hpp"
#include "test_util.hpp"

namespace komet {
namespace {

using D = Tensor<double>;
constexpr double kStep = 1e-3;
constexpr double kTolerance = 1e-3;
constexpr int kTrials = 20;

// Reduces any tensor to a scalar with fixed random weights so every output
// coordinate influences the check.
D weighted_sum(const D& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = testing::random_tensor<double>(y.shape(), rng, 0.5, 1.5);
  return sum(mul(y, w));
}

struct Case {
  std::string name;
  // Builds fresh leaves for one trial and returns the scalar objective.
  std::function<std::function<D()>(std::mt19937_64&, std::vector<D>&)> make;
};

std::vector<Case> primitive_cases() {
  std::vector<Case> cases;
  auto leaf = [](std::vector<D>& params, Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    params.push_back(testing::random_tensor<double>(std::move(shape), rng, lo, hi, true));
    return params.back();
  };
  cases.push_back({"add", [leaf](auto& rng, auto& ps) {
                     auto a = leaf(ps, {2, 3}, rng);
                     auto b = leaf(ps, {3}, rng);
                     return std::function<D()>([=] { return weighted_sum(add(a, b), 1); });
                   }});
  cases.push_back({"mul", [leaf](auto& rng, auto& ps) {
                     auto a = leaf(ps, {2, 3}, rng);
                     auto b = leaf(ps, {2, 1}, rng);
                     return std::function<D()>([=] { return weighted_sum(mul(a, b), 2); });
                   }});
  cases.push_back({"matmul", [leaf](auto& rng, auto& ps) {
                     auto a = leaf(ps, {2, 3, 4}, rng);
                     auto b = leaf(ps, {2, 4, 2}, rng);
                     return std::function<D()>([=] { return weighted_sum(matmul(a, b), 3); });
                   }});
  cases.push_back({"linear", [leaf](auto& rng, auto& ps) {
                     auto x = leaf(ps, {2, 3, 4}, rng);
                     auto w = leaf(ps, {4, 5}, rng);
                     auto b = leaf(ps, {5}, rng);
                     return std::function<D()>([=] { return weighted_sum(linear(x, w, &b), 4); });
                   }});
  cases.push_back({"linear_nt", [leaf](auto& rng, auto& ps) {
                     auto x = leaf(ps, {3, 4}, rng);
                     auto w = leaf(ps, {2, 4}, rng);
                     return std::function<D()>([=] { return weighted_sum(linear_nt(x, w), 5); });
                   }});
  cases.push_back({"layer_norm", [leaf](auto& rng, auto& ps) {
                     auto x = leaf(ps, {3, 6}, rng, -2, 2);
                     auto g = leaf(ps, {6}, rng, 0.5, 1.5);
                     auto s = leaf(ps, {6}, rng);
                     return std::function<D()>([=] { return weighted_sum(layer_norm(x, g, s, 1e-5), 6); });
                   }});
  cases.push_back({"gelu", [leaf](auto& rng, auto& ps) {
                     auto x = leaf(ps, {10}, rng, -3, 3);
                     return std::function<D()>([=] { return weighted_sum(gelu(x), 7); });
                   }});
  cases.push_back({"tanh", [leaf](auto& rng, auto& ps) {
                     auto x = leaf(ps, {10}, rng, -2, 2);
                     return std::function<D()>([=] { return weighted_sum(tanh(x), 8); });
                   }});
  cases.push_back({"softmax_t", [leaf](auto& rng, auto& ps) {
                     auto x = leaf(ps, {3, 5}, rng, -3, 3);
                     return std::function<D()>([=] { return weighted_sum(softmax_t(x, -1, 2.0), 9); });
                   }});
  cases.push_back({"softmax_t_axis0", [leaf](auto& rng, auto& ps) {
                     auto x = leaf(ps, {4, 3}, rng, -3, 3);
                     return std::function<D()>([=] { return weighted_sum(softmax_t(x, 0, 0.7), 10); });
                   }});
  cases.push_back({"mean_axis", [leaf](auto& rng, auto& ps) {
                     auto x = leaf(ps, {2, 3, 4}, rng);
                     return std::function<D()>([=] { return weighted_sum(mean_axis(x, 1), 11); });
                   }});
  cases.push_back({"flatten_permute_select", [leaf](auto& rng, auto& ps) {
                     auto x = leaf(ps, {2, 3, 4}, rng);
                     return std::function<D()>(
                         [=] { return weighted_sum(select(flatten_trailing(permute(x, {2, 0, 1})), 1, 2), 12); });
                   }});
  cases.push_back({"embedding", [leaf](auto& rng, auto& ps) {
                     auto table = leaf(ps, {5, 3}, rng);
                     return std::function<D()>([=] {
                       const std::vector<std::int32_t> ids{4, 0, 4, 2};
                       return weighted_sum(embedding_lookup(table, std::span<const std::int32_t>(ids), {2, 2}), 13);
                     });
                   }});
  cases.push_back({"mse", [leaf](auto& rng, auto& ps) {
                     auto a = leaf(ps, {2, 4}, rng);
                     auto b = leaf(ps, {2, 4}, rng);
                     return std::function<D()>([=] { return mse(a, b); });
                   }});
  cases.push_back({"soft_cross_entropy", [leaf](auto& rng, auto& ps) {
                     auto z = leaf(ps, {3, 6}, rng, -3, 3);
                     auto target = softmax_t(testing::random_tensor<double>({3, 6}, rng, -3, 3), -1, 1.0);
                     return std::function<D()>(
                         [=] { return soft_cross_entropy(target, softmax_t(z, -1, 2.0), 1e-8); });
                   }});
  cases.push_back({"label_cross_entropy", [leaf](auto& rng, auto& ps) {
                     auto z = leaf(ps, {4, 3}, rng, -3, 3);
                     return std::function<D()>([=] {
                       const std::vector<std::int32_t> labels{0, 2, -1, 1};
                       return label_cross_entropy(z, std::span<const std::int32_t>(labels));
                     });
                   }});
  return cases;
}

TEST(GradCheckTest, EveryPrimitivePassesOnSeededInputs) {
  for (const auto& c : primitive_cases()) {
    for (int trial = 0; trial < kTrials; ++trial) {
      std::mt19937_64 rng(1000 + trial);
      std::vector<D> params;
      auto loss = c.make(rng, params);
      const double err = grad_check<double>(loss, std::span<D>(params), kStep);
      EXPECT_LT(err, kTolerance) << c.name << " trial " << trial;
    }
  }
}

TEST(GradCheckTest, SumOfSquaresIsTight) {
  std::mt19937_64 rng(11);
  auto x = testing::random_tensor<double>({6}, rng);
  const double err = grad_check<double>(std::function<D(const D&)>([](const D& v) { return sum(mul(v, v)); }), x, 1e-3);
  EXPECT_LT(err, 1e-5);
}

TEST(GradCheckTest, SoftmaxCrossEntropyComposite) {
  std::mt19937_64 rng(12);
  auto x = testing::random_tensor<double>({4, 5}, rng, -2, 2);
  auto target = softmax_t(testing::random_tensor<double>({4, 5}, rng, -2, 2), -1, 1.0);
  const double err = grad_check<double>(
      std::function<D(const D&)>([&](const D& v) { return soft_cross_entropy(target, softmax_t(v, -1, 2.0), 1e-8); }),
      x, 1e-3);
  EXPECT_LT(err, 1e-3);
}

TEST(GradCheckTest, LinearFunctionIsExactUpToRounding) {
  std::mt19937_64 rng(13);
  auto x = testing::random_tensor<double>({5}, rng);
  auto w = testing::random_tensor<double>({5}, rng);
  const double err =
      grad_check<double>(std::function<D(const D&)>([&](const D& v) { return sum(mul(v, w)); }), x, 1e-3);
  EXPECT_LT(err, 1e-7);
}

TEST(GradCheckTest, ReportsWrongGradient) {
  // A deliberately broken "loss" whose graph ignores a term the value uses.
  std::mt19937_64 rng(14);
  auto x = testing::random_tensor<double>({3}, rng, 0.5, 1.0, true);
  std::vector<D> params{x};
  auto loss = [&]() {
    const double hidden = x.values().square().sum();
    return add(sum(x), D::scalar(hidden));
  };
  EXPECT_GT(grad_check<double>(loss, std::span<D>(params), 1e-3), 0.1);
}

}  // namespace
}  // namespace komet
