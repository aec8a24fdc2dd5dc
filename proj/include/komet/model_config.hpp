#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace komet {

// Architecture of one encoder in the teacher/student family.
struct ModelConfig {
  std::int64_t hidden_size = 256;
  std::int64_t num_heads = 8;
  std::int64_t num_layers = 6;
  std::int64_t intermediate_size = 1024;
  std::int64_t vocab_size = 250002;
  std::int64_t max_positions = 514;
  std::int64_t type_vocab_size = 1;
  bool with_pooler = true;
  double layer_norm_eps = 1e-5;
  std::uint64_t seed = 0;

  std::int64_t head_dim() const { return hidden_size / num_heads; }

  bool operator==(const ModelConfig&) const = default;
};

// Throws ConfigError naming the offending field.
void validate(const ModelConfig& config);

// Built-in presets: afroxlmr-large, xlmr-comet-small, afroxlmr-comet,
// afroxlmr-base, afroxlmr-mini.
std::optional<ModelConfig> preset(std::string_view name);
std::vector<std::string> preset_names();

// Closed-form parameter tally: embeddings, embedding layer norm, every
// encoder layer, and the pooler when enabled. The LM head is tied to the word
// embeddings and adds nothing.
std::int64_t count_parameters(const ModelConfig& config);

// Size in MiB at the given storage width.
double model_size_mb(std::int64_t param_count, int bytes_per_param = 4);

double round_to(double value, int decimals);

}  // namespace komet
