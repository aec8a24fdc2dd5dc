#include <gtest/gtest.h>

#include "../support/toy_setup.hpp"
#include "komet/errors.hpp"
#include "komet/evalbench.hpp"

namespace komet {
namespace {

TEST(Metrics, MacroF1MatchesHandComputedValue) {
  // Class 0: P 2/3, R 1, F1 0.8. Classes 1 and 2 have no true positives.
  const std::vector<std::int32_t> labels{0, 1, 2, 0, 1, 2};
  const std::vector<std::int32_t> preds{0, 2, 1, 0, 0, 1};
  EXPECT_NEAR(macro_f1(preds, labels, 3), 0.8 / 3.0, 1e-12);
  EXPECT_NEAR(accuracy(preds, labels), 2.0 / 6.0, 1e-12);
  EXPECT_DOUBLE_EQ(macro_f1(labels, labels), 1.0);
}

TEST(Metrics, AbsentClassCountsAsZero) {
  const std::vector<std::int32_t> y{0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(macro_f1(y, y, 2), 1.0);
  EXPECT_NEAR(macro_f1(y, y, 3), 2.0 / 3.0, 1e-12);
}

TEST(Metrics, F1IsSymmetricInSwappedRoles) {
  // Per-class F1 is symmetric in predictions and labels, so macro F1 is too.
  const std::vector<std::int32_t> a{0, 1, 2, 2, 1, 0, 0, 2};
  const std::vector<std::int32_t> b{0, 2, 2, 1, 1, 0, 1, 2};
  EXPECT_NEAR(macro_f1(a, b, 3), macro_f1(b, a, 3), 1e-12);
}

TEST(Metrics, PercentileInterpolatesLinearly) {
  EXPECT_DOUBLE_EQ(percentile({4.0, 1.0, 3.0, 2.0}, 0.5), 2.5);
  EXPECT_NEAR(percentile({1.0, 2.0, 3.0, 4.0}, 0.95), 3.85, 1e-12);
  EXPECT_DOUBLE_EQ(percentile({7.0}, 0.95), 7.0);
  EXPECT_DOUBLE_EQ(percentile({1.0, 9.0}, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(percentile({1.0, 9.0}, 1.0), 9.0);
}

TEST(Report, LargeToCometNumbers) {
  const auto r = compression_report(*preset("afroxlmr-large"), *preset("afroxlmr-comet"), "large", "comet");
  EXPECT_EQ(r.teacher.parameters, 559890432);
  EXPECT_EQ(r.student.parameters, 68937216);
  EXPECT_DOUBLE_EQ(r.reduction_pct, 87.69);
  EXPECT_NEAR(r.teacher.size_mb, 2135.86, 2135.86e-3);
  EXPECT_NEAR(r.student.size_mb, 262.99, 262.99e-3);
  const auto table = r.to_table();
  for (const char* col : {"Model", "Parameters", "Inference Time (ms)", "Model Size (MB)", "87.69"}) {
    EXPECT_NE(table.find(col), std::string::npos) << col;
  }
  const auto j = r.to_json();
  EXPECT_EQ(j["student"]["parameters"], 68937216);
}

TEST(Benchmark, ReportsOrderedStatistics) {
  const auto model = build_model<float>(komet::testing::toy_model(16, 2, 1, 64, 8, 1));
  const auto s = benchmark_latency(model, 8, 2, 1, 5, 3);
  EXPECT_EQ(s.samples_ms.size(), 5u);
  EXPECT_GT(s.mean_ms, 0.0);
  EXPECT_LE(s.p50_ms, s.p95_ms);
  EXPECT_THROW(benchmark_latency(model, 9, 1, 0, 1), Error);
}

TEST(Finetune, SeparableToyBecomesAccurate) {
  auto toy = komet::testing::make_toy({.sequences = 96, .max_len = 8, .student_hidden = 16});
  const auto examples = separable_labeled_set(90, 4);
  const auto data = encode_labeled(examples, toy.vocab, 8);
  FinetuneConfig cfg;
  cfg.epochs = 12;
  cfg.learning_rate = 3e-3;
  cfg.seed = 1;
  const auto clf = finetune_classifier(toy.student, data, cfg);
  EXPECT_EQ(clf.num_classes(), 3);
  const auto preds = predict(clf, data.tokens);
  EXPECT_GE(accuracy(preds, data.labels), 0.9);
  EXPECT_GE(macro_f1(preds, data.labels, 3), 0.9);
}

TEST(Finetune, RejectsOutOfRangeLabels) {
  auto toy = komet::testing::make_toy();
  auto examples = separable_labeled_set(6, 1);
  auto data = encode_labeled(examples, toy.vocab, 8);
  data.labels[2] = 5;
  EXPECT_THROW(finetune_classifier(toy.student, data, FinetuneConfig{}), DataError);
}

}  // namespace
}  // namespace komet
