#include "komet/model_config.hpp"

#include <cmath>
#include <map>

#include "komet/errors.hpp"

namespace komet {

namespace {

ModelConfig make_preset(std::int64_t hidden, std::int64_t heads, std::int64_t layers, std::int64_t intermediate) {
  ModelConfig c;
  c.hidden_size = hidden;
  c.num_heads = heads;
  c.num_layers = layers;
  c.intermediate_size = intermediate;
  return c;
}

const std::map<std::string, ModelConfig, std::less<>>& presets() {
  static const std::map<std::string, ModelConfig, std::less<>> table{
      {"afroxlmr-large", make_preset(1024, 16, 24, 4096)},
      {"xlmr-comet-small", make_preset(384, 12, 6, 1536)},
      {"afroxlmr-comet", make_preset(256, 8, 6, 1024)},
      {"afroxlmr-base", make_preset(768, 12, 12, 3072)},
      {"afroxlmr-mini", make_preset(384, 12, 12, 1536)},
  };
  return table;
}

void require_positive(std::int64_t value, const char* field) {
  if (value < 1) throw ConfigError(std::string("model config: ") + field + " must be >= 1, got " + std::to_string(value));
}

}  // namespace

void validate(const ModelConfig& c) {
  require_positive(c.hidden_size, "hidden_size");
  require_positive(c.num_heads, "num_heads");
  require_positive(c.num_layers, "num_layers");
  require_positive(c.intermediate_size, "intermediate_size");
  require_positive(c.vocab_size, "vocab_size");
  require_positive(c.max_positions, "max_positions");
  require_positive(c.type_vocab_size, "type_vocab_size");
  if (c.hidden_size % c.num_heads != 0) {
    throw ConfigError("model config: hidden_size " + std::to_string(c.hidden_size) + " is not divisible by num_heads " +
                      std::to_string(c.num_heads));
  }
  if (!(c.layer_norm_eps > 0.0)) throw ConfigError("model config: layer_norm_eps must be > 0");
}

std::optional<ModelConfig> preset(std::string_view name) {
  const auto& table = presets();
  auto it = table.find(name);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& [name, _] : presets()) names.push_back(name);
  return names;
}

std::int64_t count_parameters(const ModelConfig& c) {
  const std::int64_t h = c.hidden_size;
  const std::int64_t ff = c.intermediate_size;
  const std::int64_t embeddings = (c.vocab_size + c.max_positions + c.type_vocab_size) * h + 2 * h;
  const std::int64_t attention = 4 * (h * h + h);
  const std::int64_t norms = 2 * 2 * h;
  const std::int64_t feed_forward = (h * ff + ff) + (ff * h + h);
  const std::int64_t pooler = c.with_pooler ? h * h + h : 0;
  return embeddings + c.num_layers * (attention + norms + feed_forward) + pooler;
}

double model_size_mb(std::int64_t param_count, int bytes_per_param) {
  return static_cast<double>(param_count) * static_cast<double>(bytes_per_param) / static_cast<double>(1 << 20);
}

double round_to(double value, int decimals) {
  const double f = std::pow(10.0, decimals);
  return std::round(value * f) / f;
}

}  // namespace komet
