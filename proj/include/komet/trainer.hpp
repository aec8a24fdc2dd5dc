#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "komet/adamw.hpp"
#include "komet/data.hpp"
#include "komet/distillation.hpp"
#include "komet/early_stop.hpp"
#include "komet/encoder.hpp"

namespace komet {

struct TrainerConfig {
  double learning_rate = 5e-5;
  int epochs = 15;
  int batch_size = 8;
  int grad_accum_steps = 2;
  int logging_steps = 50;
  int early_stop_patience = 3;
  double early_stop_threshold = 0.01;
  int save_total_limit = 3;
  bool load_best_at_end = true;
  bool fp16 = false;  // recorded only; arithmetic stays 32-bit
  std::uint64_t seed = 0;
  AdamWConfig optimizer;
  // Stop after this many optimizer steps (0 = no cap). The epoch in progress
  // is still evaluated.
  std::int64_t max_steps = 0;
  // 0 means batch_size.
  int eval_batch_size = 0;
  // Evaluate the untrained student as epoch 0 and seed early stopping and
  // best tracking with it.
  bool baseline_eval = true;
};

void validate(const TrainerConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;  // mean total over micro-batches; NaN for epoch 0
  LossBreakdown eval;
  std::int64_t step = 0;  // optimizer steps taken so far
  bool improved = false;  // counted as an improvement by early stopping
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;  // minimum eval total, earliest on ties
  double best_eval_loss = 0.0;
  bool stopped_early = false;
  int last_epoch = 0;
  std::int64_t steps = 0;
  bool restored_best = false;

  const EpochRecord& record(int epoch) const;
};

// Where distill_train persists artifacts. An empty dir disables checkpoints
// and metrics.
struct TrainOutputs {
  std::string dir;
  const Vocab* vocab = nullptr;  // stored in every checkpoint manifest when set
};

// Example-weighted mean of the objective over `data` in fixed order.
LossBreakdown evaluate(const EncoderModel<float>& teacher, const EncoderModel<float>& student,
                       const ProjectionLayer<float>& proj, const TokenDataset& data, const DistillationConfig& dcfg,
                       int batch_size);

// Mean KL(P_T || P_S) at the given temperature over every position.
double evaluate_kl(const EncoderModel<float>& teacher, const EncoderModel<float>& student, const TokenDataset& data,
                   double temperature, int batch_size);

// The distillation loop. Updates student and proj in place; the teacher is
// only read. Each optimizer window of grad_accum_steps micro-batches scales
// every micro-batch loss by its share of the window's examples, so the step
// matches one large batch of the same examples.
TrainReport distill_train(const EncoderModel<float>& teacher, EncoderModel<float>& student,
                          ProjectionLayer<float>& proj, const TokenDataset& train, const TokenDataset& eval,
                          const DistillationConfig& dcfg, const TrainerConfig& tcfg, const TrainOutputs& outputs = {});

// Student parameters followed by "projection.weight": the optimizer's view.
std::vector<NamedTensor<float>> trainable_parameters(const EncoderModel<float>& student,
                                                     const ProjectionLayer<float>& proj);

}  // namespace komet
