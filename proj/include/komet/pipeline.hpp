#pragma once

#include <filesystem>
#include <string>

#include "komet/data.hpp"
#include "komet/encoder.hpp"
#include "komet/run_config.hpp"
#include "komet/trainer.hpp"

namespace komet {

struct PreparedData {
  Vocab vocab;
  TokenDataset train;
  TokenDataset eval;
  std::size_t dropped_empty = 0;
};

// Load, split, build the vocabulary from the training split, and encode.
PreparedData prepare_data(const DataConfig& cfg);

// Resolves "auto" vocab sizes and checks that both models cover the vocabulary.
void resolve_vocab_sizes(RunConfig& cfg, const Vocab& vocab);

struct DistillRun {
  RunConfig config;  // fully resolved
  PreparedData data;
  EncoderModel<float> teacher;
  EncoderModel<float> student;
  ProjectionLayer<float> projection;
  TrainReport report;
};

// The whole distill command: data, teacher (loaded, or initialized and
// optionally pretrained), student, projection, training. With a non-empty
// out_dir it writes checkpoints, metrics.jsonl, config.resolved.json,
// report.json and report.txt there.
DistillRun run_distillation(RunConfig cfg, const std::filesystem::path& out_dir);

Json report_json(const DistillRun& run);

}  // namespace komet
