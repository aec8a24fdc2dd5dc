#include "komet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>

#include "komet/checkpoint.hpp"
#include "komet/errors.hpp"
#include "komet/log.hpp"
#include "komet/run_config.hpp"

namespace komet {

namespace {

void require(bool ok, const char* field, const char* rule) {
  if (!ok) throw ConfigError(std::string("trainer.") + field + " " + rule);
}

class MetricsStream {
 public:
  explicit MetricsStream(const std::string& dir) {
    if (dir.empty()) return;
    const auto path = std::filesystem::path(dir) / "metrics.jsonl";
    out_.emplace(path, std::ios::trunc);
    if (!*out_) throw IoError("cannot write " + path.string());
  }

  void write(const Json& record) {
    if (!out_) return;
    *out_ << record.dump() << '\n';
    out_->flush();
  }

 private:
  std::optional<std::ofstream> out_;
};

Json loss_record(const char* event, std::int64_t step, int epoch, double total, double distill,
                 std::optional<double> attention, double lr, double wall_ms) {
  Json j{{"event", event},
         {"step", step},
         {"epoch", epoch},
         {"loss_total", total},
         {"loss_distill", distill},
         {"loss_attention", attention ? Json(*attention) : Json(nullptr)},
         {"lr", lr},
         {"wall_ms", wall_ms}};
  return j;
}

}  // namespace

void validate(const TrainerConfig& t) {
  require(t.learning_rate > 0.0, "learning_rate", "must be > 0");
  require(t.epochs >= 1, "epochs", "must be >= 1");
  require(t.batch_size >= 1, "batch_size", "must be >= 1");
  require(t.grad_accum_steps >= 1, "grad_accum_steps", "must be >= 1");
  require(t.logging_steps >= 1, "logging_steps", "must be >= 1");
  require(t.early_stop_patience >= 1, "early_stop_patience", "must be >= 1");
  require(t.early_stop_threshold >= 0.0, "early_stop_threshold", "must be >= 0");
  require(t.save_total_limit >= 1, "save_total_limit", "must be >= 1");
  require(t.max_steps >= 0, "max_steps", "must be >= 0");
  require(t.eval_batch_size >= 0, "eval_batch_size", "must be >= 0");
  validate(t.optimizer);
}

const EpochRecord& TrainReport::record(int epoch) const {
  for (const auto& r : epochs) {
    if (r.epoch == epoch) return r;
  }
  throw ContractError("no record for epoch " + std::to_string(epoch));
}

std::vector<NamedTensor<float>> trainable_parameters(const EncoderModel<float>& student,
                                                     const ProjectionLayer<float>& proj) {
  auto params = student.named_parameters();
  params.push_back({"projection.weight", proj.weight});
  return params;
}

LossBreakdown evaluate(const EncoderModel<float>& teacher, const EncoderModel<float>& student,
                       const ProjectionLayer<float>& proj, const TokenDataset& data, const DistillationConfig& dcfg,
                       int batch_size) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  NoGradGuard no_grad;
  double distill = 0.0;
  double attention = 0.0;
  double total = 0.0;
  bool has_attention = false;
  double count = 0.0;
  for (const auto& batch : batches(data, batch_size, 0, 0, false)) {
    const auto terms = distillation_objective(teacher, student, proj, batch, dcfg);
    const double w = static_cast<double>(batch.size());
    distill += w * terms.breakdown.distill;
    if (terms.breakdown.attention) {
      has_attention = true;
      attention += w * *terms.breakdown.attention;
    }
    total += w * terms.breakdown.total;
    count += w;
  }
  LossBreakdown out;
  out.distill = distill / count;
  if (has_attention) out.attention = attention / count;
  out.total = total / count;
  return out;
}

double evaluate_kl(const EncoderModel<float>& teacher, const EncoderModel<float>& student, const TokenDataset& data,
                   double temperature, int batch_size) {
  DistillationConfig cfg;
  cfg.loss_mode = SoftLossMode::kKl;
  cfg.temperature = temperature;
  cfg.use_attention = false;
  ProjectionLayer<float> unused;
  return evaluate(teacher, student, unused, data, cfg, batch_size).distill;
}

TrainReport distill_train(const EncoderModel<float>& teacher, EncoderModel<float>& student,
                          ProjectionLayer<float>& proj, const TokenDataset& train, const TokenDataset& eval,
                          const DistillationConfig& dcfg, const TrainerConfig& tcfg, const TrainOutputs& outputs) {
  validate(dcfg);
  validate(tcfg);
  if (train.size() == 0) throw ConfigError("distill_train: the training split is empty");
  if (eval.size() == 0) throw ConfigError("distill_train: the evaluation split is empty");
  if (train.length() != eval.length()) throw DimensionError("distill_train: train and eval lengths differ");
  if (dcfg.use_attention && (proj.student_length != train.length() || proj.teacher_length != train.length())) {
    throw ConfigError("distill_train: projection maps L=" + std::to_string(proj.student_length) + " to L=" +
                      std::to_string(proj.teacher_length) + " but sequences have length " +
                      std::to_string(train.length()));
  }
  if (tcfg.fp16) log::info("fp16 requested: recorded only, training runs in 32-bit floats");

  const auto params = trainable_parameters(student, proj);
  for (const auto& p : params) Tensor<float>(p.tensor).set_requires_grad(true);
  AdamWState optimizer{tcfg.optimizer, 0, {}, {}};
  const int eval_batch = tcfg.eval_batch_size > 0 ? tcfg.eval_batch_size : tcfg.batch_size;

  std::optional<CheckpointManager> checkpoints;
  if (!outputs.dir.empty()) checkpoints.emplace(outputs.dir, tcfg.save_total_limit);
  MetricsStream metrics(outputs.dir);
  const auto started = std::chrono::steady_clock::now();
  auto wall_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  };

  TrainReport report;
  EarlyStopState early;
  std::vector<Tensor<float>::Array> best_values;
  std::int64_t step = 0;

  auto abort_run = [&](const std::string& why, int epoch) {
    metrics.write(Json{{"event", "abort"}, {"step", step}, {"epoch", epoch}, {"reason", why}, {"wall_ms", wall_ms()}});
    log::error("training aborted: ", why);
    throw TrainingAborted(why);
  };

  // Evaluates, records, checkpoints; returns true when early stopping fires.
  auto end_of_epoch = [&](int epoch, double train_loss) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_loss;
    rec.step = step;
    rec.eval = evaluate(teacher, student, proj, eval, dcfg, eval_batch);
    if (!std::isfinite(rec.eval.total)) abort_run("eval loss is not finite at epoch " + std::to_string(epoch), epoch);
    const bool is_best = report.best_epoch < 0 || rec.eval.total < report.best_eval_loss;
    if (is_best) {
      report.best_epoch = epoch;
      report.best_eval_loss = rec.eval.total;
      best_values.clear();
      for (const auto& p : params) best_values.push_back(p.tensor.values());
    }
    const auto decision =
        early_stop_update(early, rec.eval.total, tcfg.early_stop_patience, tcfg.early_stop_threshold);
    rec.improved = early.epochs_without_improvement == 0;
    metrics.write(loss_record("eval", step, epoch, rec.eval.total, rec.eval.distill, rec.eval.attention,
                              tcfg.learning_rate, wall_ms()));
    log::info("epoch ", epoch, " eval loss ", rec.eval.total, is_best ? " (best)" : "");
    if (checkpoints) {
      Checkpoint ckpt;
      ckpt.epoch = epoch;
      ckpt.step = step;
      ckpt.eval_loss = rec.eval.total;
      ckpt.model = student;
      ckpt.projection = proj;
      ckpt.optimizer = optimizer;
      if (outputs.vocab) ckpt.vocab = *outputs.vocab;
      checkpoints->save(ckpt, is_best);
    }
    report.epochs.push_back(rec);
    report.last_epoch = epoch;
    return decision == EarlyStopDecision::kStop;
  };

  bool stop = false;
  if (tcfg.baseline_eval) stop = end_of_epoch(0, std::numeric_limits<double>::quiet_NaN());

  for (int epoch = 1; epoch <= tcfg.epochs && !stop; ++epoch) {
    const auto order = batch_indices(train.size(), tcfg.batch_size, tcfg.seed, static_cast<std::uint64_t>(epoch));
    for (const auto& p : params) Tensor<float>(p.tensor).zero_grad();
    double epoch_loss = 0.0;
    double epoch_examples = 0.0;
    double log_total = 0.0, log_distill = 0.0, log_attention = 0.0;
    int log_count = 0;
    bool log_has_attention = false;
    std::int64_t micro = 0;
    bool capped = false;

    for (std::size_t first = 0; first < order.size();) {
      const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(tcfg.grad_accum_steps));
      double window_examples = 0.0;
      for (std::size_t i = first; i < last; ++i) window_examples += static_cast<double>(order[i].size());

      for (std::size_t i = first; i < last; ++i) {
        const Batch batch = gather(train, order[i]);
        const auto terms = distillation_objective(teacher, student, proj, batch, dcfg);
        const double total = terms.breakdown.total;
        if (!std::isfinite(total)) {
          abort_run("training loss is not finite at epoch " + std::to_string(epoch) + ", step " +
                        std::to_string(step + 1),
                    epoch);
        }
        const double share = static_cast<double>(batch.size()) / window_examples;
        scale(terms.total, static_cast<float>(share)).backward();

        epoch_loss += total * static_cast<double>(batch.size());
        epoch_examples += static_cast<double>(batch.size());
        log_total += total;
        log_distill += terms.breakdown.distill;
        if (terms.breakdown.attention) {
          log_has_attention = true;
          log_attention += *terms.breakdown.attention;
        }
        ++log_count;
        ++micro;
        if (micro % tcfg.logging_steps == 0) {
          const double n = static_cast<double>(log_count);
          metrics.write(loss_record("train", step, epoch, log_total / n, log_distill / n,
                                    log_has_attention ? std::optional<double>(log_attention / n) : std::nullopt,
                                    tcfg.learning_rate, wall_ms()));
          log::debug("epoch ", epoch, " micro-batch ", micro, " loss ", log_total / n);
          log_total = log_distill = log_attention = 0.0;
          log_count = 0;
        }
      }
      adamw_step(params, optimizer, tcfg.learning_rate);
      for (const auto& p : params) Tensor<float>(p.tensor).zero_grad();
      ++step;
      first = last;
      if (tcfg.max_steps > 0 && step >= tcfg.max_steps) {
        capped = true;
        break;
      }
    }
    if (log_count > 0) {
      const double n = static_cast<double>(log_count);
      metrics.write(loss_record("train", step, epoch, log_total / n, log_distill / n,
                                log_has_attention ? std::optional<double>(log_attention / n) : std::nullopt,
                                tcfg.learning_rate, wall_ms()));
    }
    stop = end_of_epoch(epoch, epoch_loss / epoch_examples);
    report.stopped_early = stop;
    if (capped) break;
  }
  report.steps = step;

  if (tcfg.load_best_at_end && !best_values.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) Tensor<float>(params[i].tensor).mutable_values() = best_values[i];
    report.restored_best = true;
    log::info("restored best weights from epoch ", report.best_epoch);
  }
  return report;
}

}  // namespace komet
