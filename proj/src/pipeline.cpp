#include "komet/pipeline.hpp"

#include <fstream>

#include "komet/checkpoint.hpp"
#include "komet/errors.hpp"
#include "komet/evalbench.hpp"
#include "komet/log.hpp"
#include "komet/synthetic.hpp"

namespace komet {

namespace fs = std::filesystem;

PreparedData prepare_data(const DataConfig& cfg) {
  if (cfg.corpus.empty()) throw ConfigError("data.corpus: at least one corpus file is required");
  const Corpus corpus = load_corpus(cfg.corpus);
  if (corpus.size() == 0) throw ConfigError("data.corpus: no non-empty sequences found");
  auto split = split_corpus(corpus, cfg.train_fraction, cfg.split_seed, cfg.per_language_split);
  if (split.train.size() == 0 || split.eval.size() == 0) {
    throw ConfigError("data.train_fraction: leaves an empty " + std::string(split.train.size() == 0 ? "train" : "eval") +
                      " split for " + std::to_string(corpus.size()) + " sequences");
  }
  PreparedData out;
  out.vocab = Vocab::build(split.train.sequences, cfg.tokenizer);
  out.train = encode_corpus(split.train, out.vocab, cfg.max_length);
  out.eval = encode_corpus(split.eval, out.vocab, cfg.max_length);
  out.dropped_empty = corpus.dropped_empty;
  log::info("data: ", out.train.size(), " train / ", out.eval.size(), " eval sequences, vocabulary ", out.vocab.size());
  return out;
}

void resolve_vocab_sizes(RunConfig& cfg, const Vocab& vocab) {
  for (auto* spec : {&cfg.teacher, &cfg.student}) {
    const char* where = spec == &cfg.teacher ? "model_teacher" : "model_student";
    if (spec->vocab_auto) {
      spec->config.vocab_size = vocab.size();
      spec->vocab_auto = false;
    }
    if (spec->config.vocab_size < vocab.size()) {
      throw ConfigError(std::string(where) + ".vocab_size: " + std::to_string(spec->config.vocab_size) +
                        " is smaller than the vocabulary (" + std::to_string(vocab.size()) + " tokens)");
    }
  }
  if (cfg.teacher.config.vocab_size != cfg.student.config.vocab_size) {
    throw ConfigError("model_student.vocab_size: teacher and student must share one vocabulary (" +
                      std::to_string(cfg.teacher.config.vocab_size) + " vs " +
                      std::to_string(cfg.student.config.vocab_size) + ")");
  }
}

DistillRun run_distillation(RunConfig cfg, const fs::path& out_dir) {
  DistillRun run;
  run.data = prepare_data(cfg.data);
  resolve_vocab_sizes(cfg, run.data.vocab);

  if (!cfg.teacher.checkpoint.empty()) {
    auto ckpt = load_checkpoint(cfg.teacher.checkpoint);
    if (ckpt.model.config.vocab_size != cfg.student.config.vocab_size) {
      throw ConfigError("model_teacher.checkpoint: vocabulary size " + std::to_string(ckpt.model.config.vocab_size) +
                        " does not match the student's " + std::to_string(cfg.student.config.vocab_size));
    }
    run.teacher = std::move(ckpt.model);
    cfg.teacher.config = run.teacher.config;
  } else {
    run.teacher = build_model<float>(cfg.teacher.config);
    if (cfg.teacher.pretrain.epochs > 0) {
      const auto losses = pretrain_next_token(run.teacher, run.data.train, cfg.teacher.pretrain);
      log::info("teacher pretraining: final loss ", losses.back());
    }
  }
  run.student = build_model<float>(cfg.student.config);
  const Index len = run.data.train.length();
  run.projection = init_projection<float>(len, len, cfg.distill.projection_seed);

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "config.resolved.json") << to_json(cfg).dump(2) << '\n';
  }
  TrainOutputs outputs{out_dir.string(), &run.data.vocab};
  run.report = distill_train(run.teacher, run.student, run.projection, run.data.train, run.data.eval, cfg.distill,
                             cfg.trainer, outputs);
  run.config = cfg;

  if (!out_dir.empty()) {
    const auto report = report_json(run);
    std::ofstream(out_dir / "report.json") << report.dump(2) << '\n';
    std::ofstream(out_dir / "report.txt")
        << compression_report(cfg.teacher.config, cfg.student.config, "teacher", "student").to_table();
  }
  return run;
}

Json report_json(const DistillRun& run) {
  const auto& r = run.report;
  Json epochs = Json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", std::isfinite(e.train_loss) ? Json(e.train_loss) : Json(nullptr)},
                      {"eval_total", e.eval.total},
                      {"eval_distill", e.eval.distill},
                      {"eval_attention", e.eval.attention ? Json(*e.eval.attention) : Json(nullptr)},
                      {"step", e.step},
                      {"improved", e.improved}});
  }
  return Json{{"epochs", std::move(epochs)},
              {"best_epoch", r.best_epoch},
              {"best_eval_loss", r.best_eval_loss},
              {"stopped_early", r.stopped_early},
              {"last_epoch", r.last_epoch},
              {"steps", r.steps},
              {"restored_best", r.restored_best},
              {"compression", compression_report(run.config.teacher.config, run.config.student.config).to_json()}};
}

}  // namespace komet
