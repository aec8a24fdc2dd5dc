#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "komet/adamw.hpp"
#include "komet/data.hpp"
#include "komet/encoder.hpp"

namespace komet {

// Encoder body plus an affine head over the pooled first position.
struct ClassifierModel {
  EncoderModel<float> body;
  Tensor<float> head_w;  // [hidden, classes]
  Tensor<float> head_b;  // [classes]

  int num_classes() const { return static_cast<int>(head_b.size()); }
};

struct FinetuneConfig {
  int epochs = 5;
  double learning_rate = 2e-5;
  int batch_size = 8;
  std::uint64_t seed = 0;
  AdamWConfig optimizer;
};

struct LabeledDataset {
  TokenDataset tokens;
  std::vector<std::int32_t> labels;

  Eigen::Index size() const { return tokens.size(); }
};

// DataError on an example with no tokens.
LabeledDataset encode_labeled(const std::vector<LabeledExample>& examples, const Vocab& vocab, int max_len);

// Fresh head N(0, 0.02) from the seed, zero bias.
ClassifierModel make_classifier(const EncoderModel<float>& body, int num_classes, std::uint64_t seed);

// Copies the body, attaches a head and trains both with cross-entropy and
// AdamW. Labels outside [0, num_classes) raise DataError.
ClassifierModel finetune_classifier(const EncoderModel<float>& model, const LabeledDataset& data,
                                    const FinetuneConfig& cfg, int num_classes = kNumSentimentClasses);

Tensor<float> classifier_logits(const ClassifierModel& model, const Batch& batch);
std::vector<std::int32_t> predict(const ClassifierModel& model, const TokenDataset& data, int batch_size = 32);

double accuracy(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels);

// Unweighted mean of per-class F1 over classes 0..num_classes-1
// (num_classes <= 0 infers 1 + the largest id seen). A class absent from both
// inputs contributes 0 and logs a warning.
double macro_f1(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels,
                int num_classes = 0);

struct LatencyStats {
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  std::vector<double> samples_ms;
};

// Per-pass wall time of the encoder and pooler on seeded token ids with a
// full mask. Gradient recording is off; the LM head is not evaluated.
LatencyStats benchmark_latency(const EncoderModel<float>& model, int seq_len, int batch, int warmup, int iters,
                               std::uint64_t seed = 0);

// Linear interpolation between order statistics, q in [0, 1].
double percentile(std::vector<double> samples, double q);

struct ReportRow {
  std::string name;
  std::int64_t parameters = 0;
  double size_mb = 0.0;  // 4 bytes per parameter, 2 decimals
  std::optional<double> latency_ms;
};

struct CompressionReport {
  ReportRow teacher;
  ReportRow student;
  double reduction_pct = 0.0;  // 100 (1 - student/teacher), 2 decimals

  nlohmann::ordered_json to_json() const;
  std::string to_table() const;
};

CompressionReport compression_report(const ModelConfig& teacher, const ModelConfig& student,
                                     std::string teacher_name = "teacher", std::string student_name = "student");

}  // namespace komet
