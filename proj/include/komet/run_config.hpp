#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "komet/data.hpp"
#include "komet/distillation.hpp"
#include "komet/model_config.hpp"
#include "komet/synthetic.hpp"
#include "komet/trainer.hpp"

namespace komet {

using Json = nlohmann::ordered_json;

struct ModelSpec {
  ModelConfig config;
  std::string preset;      // name the config was expanded from, if any
  bool vocab_auto = false;  // vocab_size taken from the built vocabulary
  std::string checkpoint;  // load weights from this directory instead of initializing
  PretrainConfig pretrain;
};

struct DataConfig {
  std::vector<CorpusSource> corpus;
  TokenMode tokenizer = TokenMode::kChar;
  int max_length = 128;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
  bool per_language_split = false;
};

// One run configuration file with sections model_teacher, model_student,
// distill, trainer, data and presets. Relative paths resolve against the
// file's directory.
struct RunConfig {
  ModelSpec teacher;
  ModelSpec student;
  DistillationConfig distill;
  TrainerConfig trainer;
  DataConfig data;
  std::map<std::string, ModelConfig> presets;  // user presets from the file
};

// Field-level ConfigError on unknown keys, wrong types or invalid values;
// IoError when the file cannot be read.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const Json& doc, const std::filesystem::path& base_dir = {});

// Looks up user presets first, then the built-in ones.
std::optional<ModelConfig> resolve_preset(const std::string& name, const std::map<std::string, ModelConfig>& user);

// Everything resolved, defaults included.
Json to_json(const RunConfig& cfg);
Json to_json(const ModelConfig& cfg);
Json to_json(const DistillationConfig& cfg);
Json to_json(const TrainerConfig& cfg);

// Parses a model object (optionally {"preset": ...} plus overrides). `where`
// prefixes error messages.
ModelConfig model_config_from_json(const Json& j, const std::string& where,
                                   const std::map<std::string, ModelConfig>& user_presets = {},
                                   bool* vocab_auto = nullptr, std::string* preset_name = nullptr);

// Reads a file holding either a bare model object or a run configuration
// (the student section is returned then).
ModelConfig load_model_config(const std::filesystem::path& path);

// A single seed for the whole run: trainer, split, student init, projection.
void apply_seed(RunConfig& cfg, std::uint64_t seed);

}  // namespace komet
