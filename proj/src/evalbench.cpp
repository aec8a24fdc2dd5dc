#include "komet/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "komet/errors.hpp"
#include "komet/log.hpp"

namespace komet {

LabeledDataset encode_labeled(const std::vector<LabeledExample>& examples, const Vocab& vocab, int max_len) {
  LabeledDataset out;
  out.tokens.token_ids.resize(static_cast<Index>(examples.size()), max_len);
  out.tokens.attention_mask.resize(static_cast<Index>(examples.size()), max_len);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto e = tokenize(examples[i].text, vocab, max_len);
    if (e.degenerate) throw DataError("labeled example " + examples[i].id + " has no tokens");
    for (int c = 0; c < max_len; ++c) {
      out.tokens.token_ids(static_cast<Index>(i), c) = e.ids[static_cast<std::size_t>(c)];
      out.tokens.attention_mask(static_cast<Index>(i), c) = e.mask[static_cast<std::size_t>(c)];
    }
    out.labels.push_back(examples[i].label);
  }
  return out;
}

ClassifierModel make_classifier(const EncoderModel<float>& body, int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("classifier: need at least 2 classes");
  ClassifierModel m;
  m.body = body.clone();
  std::mt19937_64 rng(seed);
  m.head_w = detail::normal_tensor<float>({body.config.hidden_size, num_classes}, rng, 0.02);
  m.head_b = Tensor<float>::zeros({num_classes}, true);
  return m;
}

Tensor<float> classifier_logits(const ClassifierModel& model, const Batch& batch) {
  ForwardOptions opts;
  opts.compute_logits = false;
  opts.compute_pooler = true;
  auto out = forward(model.body, batch, opts);
  const auto pooled = model.body.config.with_pooler ? out.pooled : select(out.hidden, 1, 0);
  return linear(pooled, model.head_w, &model.head_b);
}

ClassifierModel finetune_classifier(const EncoderModel<float>& model, const LabeledDataset& data,
                                    const FinetuneConfig& cfg, int num_classes) {
  if (cfg.epochs < 0) throw ConfigError("finetune.epochs must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("finetune.batch_size must be >= 1");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("finetune.learning_rate must be > 0");
  if (static_cast<Index>(data.labels.size()) != data.size()) throw DataError("finetune: labels and rows differ");
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    if (data.labels[i] < 0 || data.labels[i] >= num_classes) {
      throw DataError("finetune: label " + std::to_string(data.labels[i]) + " of example " + std::to_string(i) +
                      " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  ClassifierModel m = make_classifier(model, num_classes, mix_seed(cfg.seed, 7));
  m.body.set_requires_grad(true);
  auto params = m.body.named_parameters();
  params.push_back({"classifier.weight", m.head_w});
  params.push_back({"classifier.bias", m.head_b});
  AdamWState state{cfg.optimizer, 0, {}, {}};
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double total = 0.0;
    int count = 0;
    for (const auto& rows : batch_indices(data.size(), cfg.batch_size, cfg.seed, static_cast<std::uint64_t>(epoch))) {
      const Batch batch = gather(data.tokens, rows);
      std::vector<std::int32_t> labels;
      for (auto r : rows) labels.push_back(data.labels[static_cast<std::size_t>(r)]);
      auto loss = label_cross_entropy(classifier_logits(m, batch), std::span<const std::int32_t>(labels));
      loss.backward();
      adamw_step(params, state, cfg.learning_rate);
      for (auto& p : params) p.tensor.zero_grad();
      total += static_cast<double>(loss.item());
      ++count;
    }
    log::debug("finetune epoch ", epoch, " loss ", total / count);
  }
  return m;
}

std::vector<std::int32_t> predict(const ClassifierModel& model, const TokenDataset& data, int batch_size) {
  NoGradGuard no_grad;
  std::vector<std::int32_t> out;
  for (const auto& batch : batches(data, batch_size, 0, 0, false)) {
    const auto logits = classifier_logits(model, batch);
    const Index classes = logits.dim(-1);
    for (Index r = 0; r < batch.size(); ++r) {
      Index best = 0;
      for (Index c = 1; c < classes; ++c) {
        if (logits.values()[r * classes + c] > logits.values()[r * classes + best]) best = c;
      }
      out.push_back(static_cast<std::int32_t>(best));
    }
  }
  return out;
}

double accuracy(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels) {
  if (predictions.size() != labels.size()) throw DataError("accuracy: length mismatch");
  if (labels.empty()) throw DataError("accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double macro_f1(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels, int num_classes) {
  if (predictions.size() != labels.size()) {
    throw DataError("macro_f1: " + std::to_string(predictions.size()) + " predictions for " +
                    std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw DataError("macro_f1: empty input");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || predictions[i] < 0) throw DataError("macro_f1: negative class id");
  }
  if (num_classes <= 0) {
    const auto hi = std::max(*std::max_element(predictions.begin(), predictions.end()),
                             *std::max_element(labels.begin(), labels.end()));
    num_classes = hi + 1;
  }
  std::vector<double> tp(static_cast<std::size_t>(num_classes), 0.0), fp(tp), fn(tp);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto p = static_cast<std::size_t>(predictions[i]);
    const auto l = static_cast<std::size_t>(labels[i]);
    if (p >= tp.size() || l >= tp.size()) throw DataError("macro_f1: class id beyond num_classes");
    if (p == l) {
      tp[p] += 1.0;
    } else {
      fp[p] += 1.0;
      fn[l] += 1.0;
    }
  }
  double sum = 0.0;
  for (std::size_t c = 0; c < tp.size(); ++c) {
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    if (denom == 0.0) {
      log::info("macro_f1: class ", c, " absent from predictions and labels; counted as F1 = 0");
      continue;
    }
    sum += 2.0 * tp[c] / denom;
  }
  return sum / static_cast<double>(tp.size());
}

double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) throw ContractError("percentile: no samples");
  std::sort(samples.begin(), samples.end());
  const double pos = q * static_cast<double>(samples.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, samples.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return samples[lo] + frac * (samples[hi] - samples[lo]);
}

LatencyStats benchmark_latency(const EncoderModel<float>& model, int seq_len, int batch, int warmup, int iters,
                               std::uint64_t seed) {
  if (iters < 1) throw ConfigError("benchmark: iters must be >= 1");
  if (warmup < 0 || seq_len < 1 || batch < 1) throw ConfigError("benchmark: seq_len, batch >= 1 and warmup >= 0");
  std::mt19937_64 rng(seed);
  // Ids 2.. avoid the reserved pad/unk slots when the vocabulary allows it.
  const auto lo = static_cast<std::int32_t>(std::min<std::int64_t>(2, model.config.vocab_size - 1));
  std::uniform_int_distribution<std::int32_t> id(lo, static_cast<std::int32_t>(model.config.vocab_size - 1));
  Batch b;
  b.token_ids.resize(batch, seq_len);
  b.attention_mask = IdMatrix::Ones(batch, seq_len);
  for (Index i = 0; i < b.token_ids.size(); ++i) b.token_ids.data()[i] = id(rng);
  ForwardOptions opts;
  opts.compute_logits = false;
  opts.compute_pooler = true;
  NoGradGuard no_grad;
  LatencyStats stats;
  for (int i = 0; i < warmup + iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    auto out = forward(model, b, opts);
    const auto t1 = std::chrono::steady_clock::now();
    if (i >= warmup) stats.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  double total = 0.0;
  for (double s : stats.samples_ms) total += s;
  stats.mean_ms = total / static_cast<double>(stats.samples_ms.size());
  stats.p50_ms = percentile(stats.samples_ms, 0.50);
  stats.p95_ms = percentile(stats.samples_ms, 0.95);
  return stats;
}

CompressionReport compression_report(const ModelConfig& teacher, const ModelConfig& student, std::string teacher_name,
                                     std::string student_name) {
  CompressionReport r;
  r.teacher = {std::move(teacher_name), count_parameters(teacher), 0.0, std::nullopt};
  r.student = {std::move(student_name), count_parameters(student), 0.0, std::nullopt};
  r.teacher.size_mb = round_to(model_size_mb(r.teacher.parameters), 2);
  r.student.size_mb = round_to(model_size_mb(r.student.parameters), 2);
  r.reduction_pct = round_to(
      100.0 * (1.0 - static_cast<double>(r.student.parameters) / static_cast<double>(r.teacher.parameters)), 2);
  return r;
}

nlohmann::ordered_json CompressionReport::to_json() const {
  auto row = [](const ReportRow& r) {
    nlohmann::ordered_json j{{"name", r.name}, {"parameters", r.parameters}, {"size_mb", r.size_mb}};
    j["inference_ms"] = r.latency_ms ? nlohmann::ordered_json(*r.latency_ms) : nlohmann::ordered_json(nullptr);
    return j;
  };
  return {{"teacher", row(teacher)}, {"student", row(student)}, {"reduction_pct", reduction_pct}};
}

std::string CompressionReport::to_table() const {
  const std::vector<std::string> header{"Model", "Parameters", "Inference Time (ms)", "Model Size (MB)"};
  std::vector<std::vector<std::string>> rows{header};
  auto fixed = [](double v, int digits) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
  };
  for (const auto* r : {&teacher, &student}) {
    rows.push_back({r->name, std::to_string(r->parameters), r->latency_ms ? fixed(*r->latency_ms, 1) : "-",
                    fixed(r->size_mb, 2)});
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      if (c > 0) out << "  ";
      // Name column left-aligned, numbers right-aligned.
      if (c == 0) out << std::left << std::setw(static_cast<int>(width[c])) << rows[i][c];
      else out << std::right << std::setw(static_cast<int>(width[c])) << rows[i][c];
    }
    out << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  out << "Parameter reduction: " << fixed(reduction_pct, 2) << "%\n";
  return out.str();
}

}  // namespace komet
