#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "komet/adamw.hpp"
#include "komet/errors.hpp"

namespace komet {
namespace {

using T = Tensor<float>;

T::Array arr(std::initializer_list<float> v) {
  return Eigen::Map<const T::Array>(v.begin(), static_cast<Eigen::Index>(v.size()));
}

// Plain double AdamW on one scalar parameter, written out step by step.
struct ScalarAdamW {
  double p, m = 0.0, v = 0.0;
  int t = 0;
  void step(double g, double lr, const AdamWConfig& c) {
    ++t;
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t));
    const double vh = v / (1 - std::pow(c.beta2, t));
    p -= lr * (mh / (std::sqrt(vh) + c.eps) + c.weight_decay * p);
  }
};

TEST(AdamW, MatchesScalarReferenceOverManySteps) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 1.0);
  T w({5}, {0.5f, -1.0f, 2.0f, 0.0f, 3.0f}, true);
  std::vector<ScalarAdamW> ref;
  for (int i = 0; i < 5; ++i) ref.push_back({static_cast<double>(w.values()[i])});
  AdamWState state;
  state.config.weight_decay = 0.1;
  const std::vector<NamedTensor<float>> params{{"w", w}};
  for (int s = 0; s < 25; ++s) {
    auto& grad = w.mutable_grad();
    for (int i = 0; i < 5; ++i) {
      const float gi = static_cast<float>(g(rng));
      grad[i] = gi;
      ref[i].step(gi, 1e-2, state.config);
    }
    adamw_step(params, state, 1e-2);
    w.zero_grad();
  }
  EXPECT_EQ(state.t, 25);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(w.values()[i], ref[i].p, 1e-5) << i;
}

TEST(AdamW, FirstStepMovesByLearningRateTimesSign) {
  // With m_hat / sqrt(v_hat) = sign(g) on step one and no decay.
  T w({3}, {1.0f, 1.0f, 1.0f}, true);
  w.mutable_grad() = arr({4.0f, -0.25f, 1e3f});
  AdamWState state;
  state.config.weight_decay = 0.0;
  adamw_step({{"w", w}}, state, 0.1);
  EXPECT_NEAR(w.values()[0], 0.9, 1e-6);
  EXPECT_NEAR(w.values()[1], 1.1, 1e-6);
  EXPECT_NEAR(w.values()[2], 0.9, 1e-6);
}

TEST(AdamW, MissingGradientOnlyDecays) {
  T w({2}, {2.0f, -4.0f}, true);
  AdamWState state;
  adamw_step({{"w", w}}, state, 0.5);
  EXPECT_NEAR(w.values()[0], 2.0 - 0.5 * 0.01 * 2.0, 1e-6);
  EXPECT_NEAR(w.values()[1], -4.0 + 0.5 * 0.01 * 4.0, 1e-6);
  ASSERT_EQ(state.m.size(), 1u);
  EXPECT_EQ(state.m[0].size(), 2);
}

TEST(AdamW, NonFiniteGradientAbortsBeforeAnyUpdate) {
  T a({2}, {1.0f, 2.0f}, true);
  T b({1}, {3.0f}, true);
  a.mutable_grad() = arr({0.1f, 0.2f});
  b.mutable_grad() = arr({std::numeric_limits<float>::quiet_NaN()});
  AdamWState state;
  EXPECT_THROW(adamw_step({{"a", a}, {"b", b}}, state, 0.1), TrainingAborted);
  EXPECT_EQ(a.values()[0], 1.0f);
  EXPECT_EQ(b.values()[0], 3.0f);
  EXPECT_EQ(state.t, 0);
}

TEST(AdamW, ValidateNamesTheField) {
  AdamWConfig c;
  c.beta1 = 1.0;
  try {
    validate(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("adam_beta1"), std::string::npos);
  }
  c = AdamWConfig{};
  c.eps = 0.0;
  EXPECT_THROW(validate(c), ConfigError);
  c = AdamWConfig{};
  c.weight_decay = -1.0;
  EXPECT_THROW(validate(c), ConfigError);
  EXPECT_NO_THROW(validate(AdamWConfig{}));
}

}  // namespace
}  // namespace komet
