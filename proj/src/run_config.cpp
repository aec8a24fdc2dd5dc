#include "komet/run_config.hpp"

#include <fstream>
#include <set>

#include "komet/errors.hpp"

namespace komet {

namespace fs = std::filesystem;

namespace {

// Typed reads from one JSON object with unknown-key detection. Every error
// names the full field path.
class Section {
 public:
  Section(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  bool has(const char* key) const { return j_.contains(key); }
  const Json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string path(const char* key) const { return where_ + "." + key; }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const Json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(key, "expected true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(key, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) fail(key, "must be >= 0");
      }
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(key, "expected a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) fail(key, "expected a string");
      out = v.get<std::string>();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path(it.key().c_str()) + ": unknown field");
    }
  }

  [[noreturn]] void fail(const char* key, const std::string& why) const { throw ConfigError(path(key) + ": " + why); }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

// Re-labels a ModelConfig validation error with the section it came from.
void validate_model(const ModelConfig& c, const std::string& where) {
  try {
    validate(c);
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    const std::string prefix = "model config: ";
    if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
    throw ConfigError(where + "." + msg);
  }
}

void read_model_fields(Section& s, ModelConfig& c, const std::map<std::string, ModelConfig>& user_presets,
                       bool* vocab_auto, std::string* preset_name) {
  if (s.has("preset")) {
    std::string name;
    s.get("preset", name);
    auto p = resolve_preset(name, user_presets);
    if (!p) s.fail("preset", "unknown preset \"" + name + "\"");
    c = *p;
    if (preset_name) *preset_name = name;
  }
  s.get("hidden_size", c.hidden_size);
  s.get("num_heads", c.num_heads);
  s.get("num_layers", c.num_layers);
  s.get("intermediate_size", c.intermediate_size);
  if (s.has("vocab_size") && s.raw("vocab_size").is_string()) {
    if (s.raw("vocab_size").get<std::string>() != "auto" || vocab_auto == nullptr) {
      s.fail("vocab_size", "expected an integer" + std::string(vocab_auto ? " or \"auto\"" : ""));
    }
    *vocab_auto = true;
  } else {
    s.get("vocab_size", c.vocab_size);
  }
  s.get("max_positions", c.max_positions);
  s.get("type_vocab_size", c.type_vocab_size);
  s.get("with_pooler", c.with_pooler);
  s.get("layer_norm_eps", c.layer_norm_eps);
  s.get("seed", c.seed);
}

ModelSpec parse_model_spec(const Json& j, const std::string& where, const std::map<std::string, ModelConfig>& presets,
                           const fs::path& base_dir) {
  ModelSpec spec;
  Section s(j, where);
  read_model_fields(s, spec.config, presets, &spec.vocab_auto, &spec.preset);
  if (s.has("checkpoint")) {
    s.get("checkpoint", spec.checkpoint);
    if (!spec.checkpoint.empty() && fs::path(spec.checkpoint).is_relative()) {
      spec.checkpoint = (base_dir / spec.checkpoint).lexically_normal().string();
    }
  }
  if (s.has("pretrain")) {
    Section p(s.raw("pretrain"), s.path("pretrain"));
    p.get("epochs", spec.pretrain.epochs);
    p.get("learning_rate", spec.pretrain.learning_rate);
    p.get("batch_size", spec.pretrain.batch_size);
    p.get("seed", spec.pretrain.seed);
    p.finish();
    if (spec.pretrain.epochs < 0) p.fail("epochs", "must be >= 0");
    if (!(spec.pretrain.learning_rate > 0.0)) p.fail("learning_rate", "must be > 0");
    if (spec.pretrain.batch_size < 1) p.fail("batch_size", "must be >= 1");
  }
  s.finish();
  ModelConfig probe = spec.config;
  if (spec.vocab_auto) probe.vocab_size = 1;
  validate_model(probe, where);
  return spec;
}

}  // namespace

std::optional<ModelConfig> resolve_preset(const std::string& name, const std::map<std::string, ModelConfig>& user) {
  auto it = user.find(name);
  if (it != user.end()) return it->second;
  return preset(name);
}

ModelConfig model_config_from_json(const Json& j, const std::string& where,
                                   const std::map<std::string, ModelConfig>& user_presets, bool* vocab_auto,
                                   std::string* preset_name) {
  ModelConfig c;
  Section s(j, where);
  read_model_fields(s, c, user_presets, vocab_auto, preset_name);
  s.finish();
  ModelConfig probe = c;
  if (vocab_auto && *vocab_auto) probe.vocab_size = 1;
  validate_model(probe, where);
  return c;
}

RunConfig parse_run_config(const Json& doc, const fs::path& base_dir) {
  RunConfig cfg;
  Section root(doc, "config");

  if (root.has("presets")) {
    const Json& presets = root.raw("presets");
    if (!presets.is_object()) throw ConfigError("config.presets: expected a JSON object");
    for (auto it = presets.begin(); it != presets.end(); ++it) {
      cfg.presets[it.key()] = model_config_from_json(it.value(), "presets." + it.key(), cfg.presets);
    }
  }
  if (root.has("model_teacher")) {
    cfg.teacher = parse_model_spec(root.raw("model_teacher"), "model_teacher", cfg.presets, base_dir);
  } else {
    cfg.teacher.config = *preset("afroxlmr-large");
    cfg.teacher.preset = "afroxlmr-large";
  }
  if (root.has("model_student")) {
    cfg.student = parse_model_spec(root.raw("model_student"), "model_student", cfg.presets, base_dir);
  } else {
    cfg.student.config = *preset("afroxlmr-comet");
    cfg.student.preset = "afroxlmr-comet";
  }
  if (cfg.student.pretrain.epochs > 0) throw ConfigError("model_student.pretrain: only the teacher can be pretrained");

  if (root.has("distill")) {
    Section s(root.raw("distill"), "distill");
    auto& d = cfg.distill;
    s.get("temperature", d.temperature);
    s.get("alpha", d.alpha);
    s.get("epsilon", d.epsilon);
    if (s.has("loss_mode")) {
      std::string mode;
      s.get("loss_mode", mode);
      if (mode == "cross-entropy") {
        d.loss_mode = SoftLossMode::kCrossEntropy;
      } else if (mode == "kl") {
        d.loss_mode = SoftLossMode::kKl;
      } else {
        s.fail("loss_mode", "expected \"cross-entropy\" or \"kl\", got \"" + mode + "\"");
      }
    }
    s.get("t_squared_scaling", d.t_squared_scaling);
    s.get("mask_soft_targets", d.mask_soft_targets);
    s.get("use_attention", d.use_attention);
    s.get("projection_seed", d.projection_seed);
    s.finish();
  }
  validate(cfg.distill);

  if (root.has("trainer")) {
    Section s(root.raw("trainer"), "trainer");
    auto& t = cfg.trainer;
    s.get("learning_rate", t.learning_rate);
    s.get("epochs", t.epochs);
    s.get("batch_size", t.batch_size);
    s.get("grad_accum_steps", t.grad_accum_steps);
    s.get("logging_steps", t.logging_steps);
    s.get("early_stop_patience", t.early_stop_patience);
    s.get("early_stop_threshold", t.early_stop_threshold);
    s.get("save_total_limit", t.save_total_limit);
    s.get("load_best_at_end", t.load_best_at_end);
    s.get("fp16", t.fp16);
    s.get("seed", t.seed);
    s.get("max_steps", t.max_steps);
    s.get("eval_batch_size", t.eval_batch_size);
    s.get("baseline_eval", t.baseline_eval);
    s.get("adam_beta1", t.optimizer.beta1);
    s.get("adam_beta2", t.optimizer.beta2);
    s.get("adam_epsilon", t.optimizer.eps);
    s.get("weight_decay", t.optimizer.weight_decay);
    s.finish();
  }
  validate(cfg.trainer);

  if (root.has("data")) {
    Section s(root.raw("data"), "data");
    auto& d = cfg.data;
    if (s.has("corpus")) {
      const Json& corpus = s.raw("corpus");
      if (!corpus.is_array()) throw ConfigError("data.corpus: expected an array of paths or objects");
      for (std::size_t i = 0; i < corpus.size(); ++i) {
        const std::string where = "data.corpus[" + std::to_string(i) + "]";
        CorpusSource src;
        if (corpus[i].is_string()) {
          src.path = corpus[i].get<std::string>();
        } else {
          Section c(corpus[i], where);
          c.get("path", src.path);
          c.get("language", src.language);
          if (c.has("max_sequences")) {
            std::size_t cap = 0;
            c.get("max_sequences", cap);
            src.max_sequences = cap;
          }
          c.finish();
        }
        if (src.path.empty()) throw ConfigError(where + ".path: must name a file");
        if (fs::path(src.path).is_relative()) src.path = (base_dir / src.path).lexically_normal().string();
        d.corpus.push_back(std::move(src));
      }
    }
    if (s.has("tokenizer")) {
      std::string mode;
      s.get("tokenizer", mode);
      d.tokenizer = parse_token_mode(mode);
    }
    s.get("max_length", d.max_length);
    s.get("train_fraction", d.train_fraction);
    s.get("split_seed", d.split_seed);
    s.get("per_language_split", d.per_language_split);
    s.finish();
    if (d.max_length < 1) s.fail("max_length", "must be >= 1");
    if (!(d.train_fraction > 0.0 && d.train_fraction < 1.0)) s.fail("train_fraction", "must lie strictly in (0, 1)");
  }
  for (const auto* spec : {&cfg.teacher, &cfg.student}) {
    if (cfg.data.max_length > spec->config.max_positions) {
      throw ConfigError(std::string(spec == &cfg.teacher ? "model_teacher" : "model_student") +
                        ".max_positions: smaller than data.max_length " + std::to_string(cfg.data.max_length));
    }
  }
  root.finish();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(doc, path.parent_path());
}

ModelConfig load_model_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  if (doc.is_object() && (doc.contains("model_student") || doc.contains("model_teacher") || doc.contains("trainer"))) {
    auto cfg = parse_run_config(doc, path.parent_path());
    if (cfg.student.vocab_auto) throw ConfigError("model_student.vocab_size: \"auto\" needs a corpus to resolve");
    return cfg.student.config;
  }
  return model_config_from_json(doc, "model");
}

Json to_json(const ModelConfig& c) {
  return Json{{"hidden_size", c.hidden_size},
              {"num_heads", c.num_heads},
              {"num_layers", c.num_layers},
              {"intermediate_size", c.intermediate_size},
              {"vocab_size", c.vocab_size},
              {"max_positions", c.max_positions},
              {"type_vocab_size", c.type_vocab_size},
              {"with_pooler", c.with_pooler},
              {"layer_norm_eps", c.layer_norm_eps},
              {"seed", c.seed}};
}

Json to_json(const DistillationConfig& d) {
  return Json{{"temperature", d.temperature},
              {"alpha", d.alpha},
              {"epsilon", d.epsilon},
              {"loss_mode", d.loss_mode == SoftLossMode::kKl ? "kl" : "cross-entropy"},
              {"t_squared_scaling", d.t_squared_scaling},
              {"mask_soft_targets", d.mask_soft_targets},
              {"use_attention", d.use_attention},
              {"projection_seed", d.projection_seed}};
}

Json to_json(const TrainerConfig& t) {
  return Json{{"learning_rate", t.learning_rate},
              {"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"grad_accum_steps", t.grad_accum_steps},
              {"logging_steps", t.logging_steps},
              {"early_stop_patience", t.early_stop_patience},
              {"early_stop_threshold", t.early_stop_threshold},
              {"save_total_limit", t.save_total_limit},
              {"load_best_at_end", t.load_best_at_end},
              {"fp16", t.fp16},
              {"seed", t.seed},
              {"max_steps", t.max_steps},
              {"eval_batch_size", t.eval_batch_size},
              {"baseline_eval", t.baseline_eval},
              {"adam_beta1", t.optimizer.beta1},
              {"adam_beta2", t.optimizer.beta2},
              {"adam_epsilon", t.optimizer.eps},
              {"weight_decay", t.optimizer.weight_decay}};
}

namespace {

Json spec_to_json(const ModelSpec& s) {
  Json j = to_json(s.config);
  if (s.vocab_auto) j["vocab_size"] = "auto";
  if (!s.preset.empty()) j["preset"] = s.preset;
  if (!s.checkpoint.empty()) j["checkpoint"] = s.checkpoint;
  if (s.pretrain.epochs > 0) {
    j["pretrain"] = {{"epochs", s.pretrain.epochs},
                     {"learning_rate", s.pretrain.learning_rate},
                     {"batch_size", s.pretrain.batch_size},
                     {"seed", s.pretrain.seed}};
  }
  return j;
}

}  // namespace

Json to_json(const RunConfig& cfg) {
  Json data{{"corpus", Json::array()},
            {"tokenizer", to_string(cfg.data.tokenizer)},
            {"max_length", cfg.data.max_length},
            {"train_fraction", cfg.data.train_fraction},
            {"split_seed", cfg.data.split_seed},
            {"per_language_split", cfg.data.per_language_split}};
  for (const auto& src : cfg.data.corpus) {
    Json c{{"path", src.path}};
    if (!src.language.empty()) c["language"] = src.language;
    if (src.max_sequences) c["max_sequences"] = *src.max_sequences;
    data["corpus"].push_back(std::move(c));
  }
  Json presets = Json::object();
  for (const auto& [name, c] : cfg.presets) presets[name] = to_json(c);
  return Json{{"model_teacher", spec_to_json(cfg.teacher)},
              {"model_student", spec_to_json(cfg.student)},
              {"distill", to_json(cfg.distill)},
              {"trainer", to_json(cfg.trainer)},
              {"data", std::move(data)},
              {"presets", std::move(presets)}};
}

void apply_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.trainer.seed = seed;
  cfg.data.split_seed = seed;
  cfg.student.config.seed = mix_seed(seed, 1);
  cfg.distill.projection_seed = mix_seed(seed, 2);
  if (cfg.teacher.checkpoint.empty()) {
    cfg.teacher.config.seed = mix_seed(seed, 3);
    cfg.teacher.pretrain.seed = mix_seed(seed, 4);
  }
}

}  // namespace komet
