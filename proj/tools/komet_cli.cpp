#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "komet/checkpoint.hpp"
#include "komet/errors.hpp"
#include "komet/evalbench.hpp"
#include "komet/log.hpp"
#include "komet/pipeline.hpp"
#include "komet/run_config.hpp"
#include "komet/synthetic.hpp"

namespace fs = std::filesystem;
using namespace komet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

// Distinguishes "the operator handed us something invalid" (exit 2) from
// failures while running (exit 1).
struct UsageError : Error {
  using Error::Error;
};

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
  std::string out;
  std::vector<std::string> presets;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_out = true) {
  cmd->add_option("--config", o.config, "Run or model configuration file (JSON)");
  cmd->add_option("--seed", o.seed, "Seed for every random choice of the command");
  cmd->add_flag("--dry-run", o.dry_run, "Validate and print the resolved configuration; write nothing");
  if (with_out) cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--preset", o.presets, "Model preset name");
}

RunConfig load_config_or_usage(const std::string& path) {
  if (path.empty()) throw UsageError("--config PATH is required");
  if (!fs::exists(path)) throw UsageError("config file not found: " + path);
  try {
    return load_run_config(path);
  } catch (const IoError& e) {
    throw UsageError(e.what());
  }
}

ModelConfig model_from_options(const CommonOptions& o, const std::string& dims) {
  if (!dims.empty()) {
    ModelConfig c;
    std::vector<std::int64_t> v;
    std::stringstream in(dims);
    std::string part;
    while (std::getline(in, part, ',')) {
      try {
        v.push_back(std::stoll(part));
      } catch (const std::exception&) {
        throw UsageError("--dims: \"" + part + "\" is not an integer");
      }
    }
    if (v.size() != 4) throw UsageError("--dims expects hidden,heads,layers,intermediate");
    c.hidden_size = v[0];
    c.num_heads = v[1];
    c.num_layers = v[2];
    c.intermediate_size = v[3];
    validate(c);
    return c;
  }
  if (!o.presets.empty()) {
    auto p = preset(o.presets.front());
    if (!p) throw UsageError("unknown preset \"" + o.presets.front() + "\"");
    return *p;
  }
  if (!o.config.empty()) {
    if (!fs::exists(o.config)) throw UsageError("config file not found: " + o.config);
    return load_model_config(o.config);
  }
  throw UsageError("give --preset NAME, --config PATH or --dims H,A,L,F");
}

fs::path out_dir_or(const CommonOptions& o, const char* fallback) { return o.out.empty() ? fs::path(fallback) : fs::path(o.out); }

int cmd_distill(const CommonOptions& o) {
  RunConfig cfg = load_config_or_usage(o.config);
  if (!o.presets.empty()) {
    auto p = resolve_preset(o.presets.front(), cfg.presets);
    if (!p) throw UsageError("unknown preset \"" + o.presets.front() + "\"");
    cfg.student.config = *p;
    cfg.student.preset = o.presets.front();
  }
  if (o.seed) apply_seed(cfg, *o.seed);
  if (o.dry_run) {
    std::cout << to_json(cfg).dump(2) << '\n';
    return kExitOk;
  }
  const fs::path out = out_dir_or(o, "komet-out");
  const auto run = run_distillation(cfg, out);
  std::cout << "best epoch " << run.report.best_epoch << ", eval loss " << run.report.best_eval_loss << ", "
            << run.report.steps << " steps; artifacts in " << out.string() << '\n';
  return kExitOk;
}

int cmd_count_params(const CommonOptions& o, const std::string& dims) {
  const ModelConfig c = model_from_options(o, dims);
  std::cout << count_parameters(c) << '\n';
  log::debug(round_to(model_size_mb(count_parameters(c)), 2), " MB at 4 bytes per parameter");
  return kExitOk;
}

struct ClassifierOptions {
  std::string checkpoint;
  std::string data;
  int epochs = 5;
  double lr = 2e-5;
  int batch_size = 8;
  int max_length = 128;
};

ClassifierModel classifier_from_checkpoint(const Checkpoint& ckpt) {
  ClassifierModel m;
  m.body = ckpt.model;
  for (const auto& e : ckpt.extra) {
    if (e.name == "classifier.weight") m.head_w = e.tensor;
    if (e.name == "classifier.bias") m.head_b = e.tensor;
  }
  if (!m.head_w.defined() || !m.head_b.defined()) throw UsageError("checkpoint has no classifier head");
  return m;
}

Checkpoint load_checkpoint_or_usage(const std::string& dir) {
  if (dir.empty()) throw UsageError("--checkpoint DIR is required");
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw UsageError("no checkpoint manifest in " + dir);
  auto ckpt = load_checkpoint(dir);
  if (!ckpt.vocab) throw UsageError("checkpoint " + dir + " carries no vocabulary");
  return ckpt;
}

std::vector<LabeledExample> load_labeled_or_usage(const std::string& path) {
  if (path.empty()) throw UsageError("--data TSV is required");
  if (!fs::exists(path)) throw UsageError("labeled file not found: " + path);
  return load_labeled_tsv(path);
}

int cmd_finetune(const CommonOptions& o, const ClassifierOptions& c) {
  FinetuneConfig fc;
  fc.epochs = c.epochs;
  fc.learning_rate = c.lr;
  fc.batch_size = c.batch_size;
  fc.seed = o.seed.value_or(0);
  if (fc.epochs < 0 || fc.batch_size < 1 || !(fc.learning_rate > 0.0)) {
    throw ConfigError("finetune: --epochs >= 0, --batch-size >= 1 and --lr > 0 are required");
  }
  const auto ckpt = load_checkpoint_or_usage(c.checkpoint);
  const auto examples = load_labeled_or_usage(c.data);
  const int max_len = static_cast<int>(std::min<std::int64_t>(c.max_length, ckpt.model.config.max_positions));
  if (o.dry_run) {
    std::cout << Json{{"checkpoint", c.checkpoint}, {"data", c.data}, {"examples", examples.size()},
                      {"epochs", fc.epochs}, {"learning_rate", fc.learning_rate}, {"batch_size", fc.batch_size},
                      {"max_length", max_len}, {"seed", fc.seed}}
                     .dump(2)
              << '\n';
    return kExitOk;
  }
  const auto data = encode_labeled(examples, *ckpt.vocab, max_len);
  const auto clf = finetune_classifier(ckpt.model, data, fc);
  const auto preds = predict(clf, data.tokens);
  const fs::path out = out_dir_or(o, "komet-classifier");
  Checkpoint saved;
  saved.model = clf.body;
  saved.vocab = ckpt.vocab;
  saved.extra = {{"classifier.weight", clf.head_w}, {"classifier.bias", clf.head_b}};
  save_checkpoint(out, saved);
  std::cout << Json{{"train_accuracy", accuracy(preds, data.labels)},
                    {"train_macro_f1", macro_f1(preds, data.labels, kNumSentimentClasses)},
                    {"checkpoint", out.string()}}
                   .dump()
            << '\n';
  return kExitOk;
}

int cmd_eval(const CommonOptions& o, const ClassifierOptions& c) {
  const auto ckpt = load_checkpoint_or_usage(c.checkpoint);
  const auto examples = load_labeled_or_usage(c.data);
  if (o.dry_run) {
    std::cout << Json{{"checkpoint", c.checkpoint}, {"data", c.data}, {"examples", examples.size()}}.dump(2) << '\n';
    return kExitOk;
  }
  const auto clf = classifier_from_checkpoint(ckpt);
  const int max_len = static_cast<int>(std::min<std::int64_t>(c.max_length, ckpt.model.config.max_positions));
  const auto data = encode_labeled(examples, *ckpt.vocab, max_len);
  const auto preds = predict(clf, data.tokens);
  std::cout << Json{{"examples", examples.size()},
                    {"accuracy", accuracy(preds, data.labels)},
                    {"macro_f1", macro_f1(preds, data.labels, kNumSentimentClasses)}}
                   .dump()
            << '\n';
  return kExitOk;
}

struct BenchOptions {
  int seq_len = 128;
  int batch = 1;
  int warmup = 1;
  int iters = 5;
};

int cmd_bench(const CommonOptions& o, const BenchOptions& b) {
  std::vector<std::pair<std::string, ModelConfig>> models;
  for (const auto& name : o.presets) {
    auto p = preset(name);
    if (!p) throw UsageError("unknown preset \"" + name + "\"");
    models.emplace_back(name, *p);
  }
  if (models.empty() && !o.config.empty()) {
    if (!fs::exists(o.config)) throw UsageError("config file not found: " + o.config);
    models.emplace_back(o.config, load_model_config(o.config));
  }
  if (models.empty()) models.emplace_back("afroxlmr-comet", *preset("afroxlmr-comet"));
  if (b.iters < 1 || b.warmup < 0 || b.seq_len < 1 || b.batch < 1) {
    throw ConfigError("bench: --iters >= 1, --warmup >= 0, --seq-len >= 1 and --batch >= 1 are required");
  }
  for (auto& [name, cfg] : models) {
    if (b.seq_len > cfg.max_positions) {
      throw ConfigError("bench: --seq-len " + std::to_string(b.seq_len) + " exceeds max_positions of " + name);
    }
    if (o.seed) cfg.seed = *o.seed;
  }
  if (o.dry_run) {
    for (const auto& [name, cfg] : models) std::cout << Json{{"name", name}, {"model", to_json(cfg)}}.dump() << '\n';
    return kExitOk;
  }
  for (const auto& [name, cfg] : models) {
    const auto model = build_model<float>(cfg);
    const auto s = benchmark_latency(model, b.seq_len, b.batch, b.warmup, b.iters, o.seed.value_or(0));
    std::cout << Json{{"name", name},      {"parameters", count_parameters(cfg)}, {"seq_len", b.seq_len},
                      {"batch", b.batch},  {"mean_ms", s.mean_ms},               {"p50_ms", s.p50_ms},
                      {"p95_ms", s.p95_ms}}
                     .dump()
              << '\n';
  }
  return kExitOk;
}

int cmd_report(const CommonOptions& o, std::string teacher_name, std::string student_name) {
  ModelConfig teacher, student;
  if (!o.config.empty()) {
    const RunConfig cfg = load_config_or_usage(o.config);
    if (cfg.teacher.vocab_auto || cfg.student.vocab_auto) {
      throw ConfigError("report: vocab_size \"auto\" cannot be resolved without a corpus");
    }
    teacher = cfg.teacher.config;
    student = cfg.student.config;
    teacher_name = cfg.teacher.preset.empty() ? "teacher" : cfg.teacher.preset;
    student_name = cfg.student.preset.empty() ? "student" : cfg.student.preset;
  } else {
    auto t = preset(teacher_name);
    auto s = preset(student_name);
    if (!t) throw UsageError("unknown preset \"" + teacher_name + "\"");
    if (!s) throw UsageError("unknown preset \"" + student_name + "\"");
    teacher = *t;
    student = *s;
  }
  const auto report = compression_report(teacher, student, teacher_name, student_name);
  std::cout << report.to_table();
  if (!o.out.empty() && !o.dry_run) {
    fs::create_directories(o.out);
    std::ofstream(fs::path(o.out) / "compression_report.json") << report.to_json().dump(2) << '\n';
    std::ofstream(fs::path(o.out) / "compression_report.txt") << report.to_table();
  }
  return kExitOk;
}

int cmd_inspect(const CommonOptions& o, const std::string& checkpoint) {
  if (!checkpoint.empty()) {
    if (!fs::exists(fs::path(checkpoint) / "manifest.json")) throw UsageError("no checkpoint manifest in " + checkpoint);
    const auto ckpt = load_checkpoint(checkpoint);
    Json tensors = Json::array();
    for (const auto& e : read_manifest_entries(checkpoint)) {
      tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}});
    }
    std::cout << Json{{"epoch", ckpt.epoch},
                      {"step", ckpt.step},
                      {"eval_loss", ckpt.eval_loss},
                      {"model", to_json(ckpt.model.config)},
                      {"parameters", ckpt.model.parameter_count()},
                      {"has_optimizer", ckpt.optimizer.has_value()},
                      {"vocab_size", ckpt.vocab ? ckpt.vocab->size() : 0},
                      {"tensors", tensors}}
                     .dump(2)
              << '\n';
    return kExitOk;
  }
  if (!o.config.empty() && o.presets.empty()) {
    const RunConfig cfg = load_config_or_usage(o.config);
    std::cout << to_json(cfg).dump(2) << '\n';
    return kExitOk;
  }
  const ModelConfig c = model_from_options(o, "");
  std::cout << Json{{"model", to_json(c)},
                    {"parameters", count_parameters(c)},
                    {"size_mb", round_to(model_size_mb(count_parameters(c)), 2)}}
                   .dump(2)
            << '\n';
  return kExitOk;
}

int cmd_synth(const CommonOptions& o, std::size_t sequences, std::size_t labeled) {
  const std::uint64_t seed = o.seed.value_or(2024);
  const fs::path out = out_dir_or(o, "komet-synth");
  if (o.dry_run) {
    std::cout << Json{{"out", out.string()}, {"sequences", sequences}, {"labeled", labeled}, {"seed", seed}}.dump()
              << '\n';
    return kExitOk;
  }
  fs::create_directories(out);
  const Corpus corpus = markov_corpus(sequences, seed);
  std::ofstream text(out / "corpus.txt");
  for (const auto& s : corpus.sequences) text << s << '\n';
  write_labeled_tsv((out / "labeled.tsv").string(), separable_labeled_set(labeled, mix_seed(seed, 1)));
  std::cout << "wrote " << (out / "corpus.txt").string() << " and " << (out / "labeled.tsv").string() << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"komet: distill a compact transformer encoder from a larger teacher"};
  app.require_subcommand(1);

  CommonOptions distill_opts, count_opts, finetune_opts, eval_opts, bench_opts, report_opts, inspect_opts, synth_opts;
  std::string dims, inspect_checkpoint, teacher_name = "afroxlmr-large", student_name = "afroxlmr-comet";
  ClassifierOptions clf;
  BenchOptions bench;
  std::size_t synth_sequences = 512, synth_labeled = 100;

  auto* distill = app.add_subcommand("distill", "Run teacher-student distillation from a run configuration");
  add_common(distill, distill_opts);

  auto* count = app.add_subcommand("count-params", "Print the analytic parameter count of a model");
  add_common(count, count_opts, false);
  count->add_option("--dims", dims, "Inline hidden,heads,layers,intermediate (other fields default)");

  auto* finetune = app.add_subcommand("finetune", "Fine-tune a checkpoint for 3-way classification");
  add_common(finetune, finetune_opts);
  finetune->add_option("--checkpoint", clf.checkpoint, "Checkpoint directory with a vocabulary");
  finetune->add_option("--data", clf.data, "Labeled TSV (ID, Tweet, Label)");
  finetune->add_option("--epochs", clf.epochs, "Training epochs");
  finetune->add_option("--lr", clf.lr, "Learning rate");
  finetune->add_option("--batch-size", clf.batch_size, "Batch size");
  finetune->add_option("--max-length", clf.max_length, "Maximum sequence length");

  auto* eval = app.add_subcommand("eval", "Score a fine-tuned classifier with macro F1");
  add_common(eval, eval_opts, false);
  eval->add_option("--checkpoint", clf.checkpoint, "Classifier checkpoint directory");
  eval->add_option("--data", clf.data, "Labeled TSV (ID, Tweet, Label)");
  eval->add_option("--max-length", clf.max_length, "Maximum sequence length");

  auto* benchmark = app.add_subcommand("bench", "Time forward passes of randomly initialized models");
  add_common(benchmark, bench_opts, false);
  benchmark->add_option("--seq-len", bench.seq_len, "Sequence length");
  benchmark->add_option("--batch", bench.batch, "Batch size");
  benchmark->add_option("--warmup", bench.warmup, "Discarded warm-up passes");
  benchmark->add_option("--iters", bench.iters, "Timed passes");

  auto* report = app.add_subcommand("report", "Compression report (parameters, size, reduction)");
  add_common(report, report_opts);
  report->add_option("--teacher", teacher_name, "Teacher preset");
  report->add_option("--student", student_name, "Student preset");

  auto* inspect = app.add_subcommand("inspect", "Describe a checkpoint, preset or configuration");
  add_common(inspect, inspect_opts, false);
  inspect->add_option("--checkpoint", inspect_checkpoint, "Checkpoint directory");

  auto* synth = app.add_subcommand("synth", "Write a synthetic Markov corpus and labeled set");
  add_common(synth, synth_opts);
  synth->add_option("--sequences", synth_sequences, "Corpus lines");
  synth->add_option("--labeled", synth_labeled, "Labeled examples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*distill) return cmd_distill(distill_opts);
    if (*count) return cmd_count_params(count_opts, dims);
    if (*finetune) return cmd_finetune(finetune_opts, clf);
    if (*eval) return cmd_eval(eval_opts, clf);
    if (*benchmark) return cmd_bench(bench_opts, bench);
    if (*report) return cmd_report(report_opts, teacher_name, student_name);
    if (*inspect) return cmd_inspect(inspect_opts, inspect_checkpoint);
    if (*synth) return cmd_synth(synth_opts, synth_sequences, synth_labeled);
  } catch (const UsageError& e) {
    std::cerr << "komet: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "komet: invalid configuration: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "komet: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}
