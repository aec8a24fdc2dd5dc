// One PASS/FAIL line per criterion; exit status 1 if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../oracle/scalar_oracle.hpp"
#include "../oracle/tiny_pipeline.hpp"
#include "komet/checkpoint.hpp"
#include "komet/early_stop.hpp"
#include "komet/evalbench.hpp"
#include "komet/log.hpp"
#include "komet/pipeline.hpp"
#include "komet/run_config.hpp"

namespace fs = std::filesystem;
using namespace komet;

namespace {

const fs::path kFixtures = KOMET_FIXTURE_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 6) {
  std::ostringstream o;
  o.precision(precision);
  o << v;
  return o.str();
}

int failures = 0;

void run(const char* id, const char* title, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome r;
  try {
    r = body();
  } catch (const std::exception& e) {
    r = {false, std::string("exception: ") + e.what()};
  }
  if (!r.pass) ++failures;
  std::cout << id << ' ' << (r.pass ? "PASS" : "FAIL") << "  " << title << "  [" << r.detail << "; "
            << fmt(seconds_since(t0), 3) << " s]" << std::endl;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

template <typename Scalar>
Tensor<Scalar> random_logits(Shape shape, std::mt19937_64& rng, double spread) {
  std::uniform_real_distribution<double> u(-spread, spread);
  typename Tensor<Scalar>::Array v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(u(rng));
  return Tensor<Scalar>(std::move(shape), std::move(v));
}

std::vector<double> as_vector(const Tensor<double>& t) { return {t.values().data(), t.values().data() + t.size()}; }

Outcome ac1_parameter_counts() {
  const auto t0 = Clock::now();
  const std::pair<const char*, std::int64_t> expected[] = {
      {"afroxlmr-large", 559890432}, {"xlmr-comet-small", 106993920}, {"afroxlmr-comet", 68937216}};
  bool ok = true;
  std::string detail;
  for (const auto& [name, count] : expected) {
    const auto got = count_parameters(*preset(name));
    ok = ok && got == count;
    detail += std::string(name) + "=" + std::to_string(got) + " ";
  }
  const double elapsed = seconds_since(t0);
  ok = ok && elapsed < 1.0;
  return {ok, detail + "in " + fmt(elapsed, 3) + " s (limit 1 s)"};
}

Outcome ac2_size_and_reduction() {
  const auto report = compression_report(*preset("afroxlmr-large"), *preset("afroxlmr-comet"));
  const double teacher_mb = model_size_mb(report.teacher.parameters);
  const double student_mb = model_size_mb(report.student.parameters);
  const double t_rel = std::abs(teacher_mb - 2135.86) / 2135.86;
  const double s_rel = std::abs(student_mb - 262.99) / 262.99;
  const double pp = std::abs(report.reduction_pct - 87.69);
  const bool ok = t_rel <= 1e-3 && s_rel <= 1e-3 && pp <= 0.01;
  return {ok, "teacher " + fmt(teacher_mb, 7) + " MB (rel err " + fmt(t_rel, 2) + "), student " + fmt(student_mb, 6) +
                  " MB (rel err " + fmt(s_rel, 2) + "), reduction " + fmt(report.reduction_pct, 6) + "% (off " +
                  fmt(pp, 2) + " pp)"};
}

Outcome ac3_gradient_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = oracle::make_tiny_pipeline(seed);
    worst = std::max(worst, oracle::hybrid_grad_error(p, DistillationConfig{}, 1e-3));
  }
  const double elapsed = seconds_since(t0);
  return {worst < 1e-3 && elapsed < 30.0,
          "max relative error " + fmt(worst, 3) + " over 20 seeds (limit 1e-3), " + fmt(elapsed, 3) + " s (limit 30 s)"};
}

Outcome ac4_loss_identities() {
  std::mt19937_64 rng(404);
  const std::size_t classes = 7;
  double min_kl_exact = 1e300, min_kl_default = 1e300, ce_minus_h_gap = 0.0, oracle_gap = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const double spread = trial % 4 == 0 ? 0.0 : 0.5 * (trial % 13);
    auto zt = random_logits<double>({2, 3, static_cast<Index>(classes)}, rng, 8.0);
    auto zs = trial % 5 == 0 ? zt.clone() : random_logits<double>({2, 3, static_cast<Index>(classes)}, rng, spread + 1.0);
    for (double tau : {1.0, 2.0, 4.0}) {
      DistillationConfig ce_cfg, kl_cfg, exact_cfg;
      ce_cfg.temperature = kl_cfg.temperature = exact_cfg.temperature = tau;
      kl_cfg.loss_mode = exact_cfg.loss_mode = SoftLossMode::kKl;
      exact_cfg.epsilon = 0.0;
      const double ce = soft_target_loss(zt, zs, ce_cfg).item();
      const double kl = soft_target_loss(zt, zs, kl_cfg).item();
      const double kl_exact = soft_target_loss(zt, zs, exact_cfg).item();
      const double h = mean_entropy(softmax_t(zt, -1, tau));
      min_kl_exact = std::min(min_kl_exact, kl_exact);
      min_kl_default = std::min(min_kl_default, kl);
      ce_minus_h_gap = std::max(ce_minus_h_gap, std::abs((ce - h) - kl));
      oracle_gap = std::max(oracle_gap,
                            std::abs(kl_exact - oracle::soft_target_kl(as_vector(zt), as_vector(zs), classes, tau)));
      oracle_gap = std::max(oracle_gap, std::abs(ce - oracle::soft_target_ce(as_vector(zt), as_vector(zs), classes,
                                                                              tau, ce_cfg.epsilon)));
    }
  }

  // Alpha extremes on the full objective.
  double alpha_gap = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = oracle::make_tiny_pipeline(seed);
    DistillationConfig cfg;
    cfg.alpha = 1.0;
    const auto one = distillation_objective(p.teacher, p.student, p.projection, p.batch, cfg);
    cfg.alpha = 0.0;
    const auto zero = distillation_objective(p.teacher, p.student, p.projection, p.batch, cfg);
    cfg.alpha = 0.3;
    const auto mid = distillation_objective(p.teacher, p.student, p.projection, p.batch, cfg);
    alpha_gap = std::max({alpha_gap, std::abs(one.total.item() - one.breakdown.distill),
                          std::abs(zero.total.item() - *zero.breakdown.attention),
                          std::abs(mid.total.item() - oracle::hybrid(mid.breakdown.distill, *mid.breakdown.attention, 0.3))});
  }

  // Identity projection with equal maps.
  double identity_loss = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Index len = 1 + trial % 6;
    const auto map_d = pool_attention(softmax_t(random_logits<double>({3, 4, len, len}, rng, 3.0), -1, 1.0));
    const auto map_f = pool_attention(softmax_t(random_logits<float>({3, 4, len, len}, rng, 3.0), -1, 1.0));
    identity_loss = std::max(identity_loss, attention_loss(map_d, map_d, init_projection<double>(len, len, 0)).item());
    identity_loss = std::max(identity_loss, static_cast<double>(attention_loss(map_f, map_f, init_projection<float>(len, len, 0)).item()));
  }

  const double eps_bound = static_cast<double>(classes) * 1e-8;
  const bool ok = min_kl_exact >= -1e-12 && min_kl_default >= -eps_bound && ce_minus_h_gap <= 1e-5 &&
                  oracle_gap <= 1e-9 && alpha_gap <= 1e-12 && identity_loss == 0.0;
  return {ok, "min KL " + fmt(min_kl_exact, 3) + " (eps 0), " + fmt(min_kl_default, 3) + " (eps 1e-8, bound -" +
                  fmt(eps_bound, 2) + "); |CE-H-KL| " + fmt(ce_minus_h_gap, 2) + "; oracle gap " + fmt(oracle_gap, 2) +
                  "; alpha-extreme gap " + fmt(alpha_gap, 2) + "; identity attention loss " + fmt(identity_loss, 2)};
}

RunConfig toy_config() { return load_run_config(kFixtures / "toy_run.json"); }

// Shared between AC5 and AC7.
struct ToyRun {
  fs::path dir;
  std::optional<DistillRun> run;
  double seconds = 0.0;
};

ToyRun& first_toy_run() {
  static ToyRun r = [] {
    ToyRun t;
    t.dir = fs::temp_directory_path() / ("komet-acceptance-a-" + std::to_string(std::random_device{}()));
    const auto t0 = Clock::now();
    t.run = run_distillation(toy_config(), t.dir);
    t.seconds = seconds_since(t0);
    return t;
  }();
  return r;
}

Outcome ac5_toy_convergence() {
  auto& toy = first_toy_run();
  const auto& run = *toy.run;
  const double epoch1 = run.report.record(1).eval.total;
  const double ratio = run.report.best_eval_loss / epoch1;
  const auto untrained = build_model<float>(run.config.student.config);
  const double tau = run.config.distill.temperature;
  const double kl_trained = evaluate_kl(run.teacher, run.student, run.data.eval, tau, 32);
  const double kl_untrained = evaluate_kl(run.teacher, untrained, run.data.eval, tau, 32);
  const bool ok = ratio <= 0.8 && kl_trained < kl_untrained && toy.seconds < 300.0;
  return {ok, "best/epoch-1 eval loss " + fmt(run.report.best_eval_loss) + "/" + fmt(epoch1) + " = " + fmt(ratio, 4) +
                  " (limit 0.8); eval KL trained " + fmt(kl_trained) + " < untrained " + fmt(kl_untrained) + "; run " +
                  fmt(toy.seconds, 3) + " s (limit 300 s)"};
}

Outcome ac6_early_stopping() {
  EarlyStopState state;
  const double trace[] = {1.00, 0.995, 0.990, 0.985};
  int stopped_at = 0;
  for (int i = 0; i < 4 && stopped_at == 0; ++i) {
    if (early_stop_update(state, trace[i], 3, 0.01) == EarlyStopDecision::kStop) stopped_at = i + 1;
  }

  // Degenerate run: the student is a copy of the teacher and alpha = 1.
  auto cfg = toy_config();
  auto data = prepare_data(cfg.data);
  resolve_vocab_sizes(cfg, data.vocab);
  const auto teacher = build_model<float>(cfg.teacher.config);
  auto student = teacher.clone();
  auto proj = init_projection<float>(data.train.length(), data.train.length(), 0);
  DistillationConfig dcfg = cfg.distill;
  dcfg.alpha = 1.0;
  dcfg.loss_mode = SoftLossMode::kKl;
  TrainerConfig tcfg = cfg.trainer;
  const auto report = distill_train(teacher, student, proj, data.train, data.eval, dcfg, tcfg);
  const int post_baseline = report.last_epoch;
  const bool ok = stopped_at == 4 && report.stopped_early && post_baseline == tcfg.early_stop_patience;
  return {ok, "trace stops at evaluation " + std::to_string(stopped_at) + " (want 4); degenerate run stopped " +
                  (report.stopped_early ? "early" : "late") + " after " + std::to_string(post_baseline) +
                  " post-baseline evaluations (patience " + std::to_string(tcfg.early_stop_patience) + ")"};
}

Outcome ac7_determinism_and_persistence() {
  auto& first = first_toy_run();
  const fs::path second = fs::temp_directory_path() / ("komet-acceptance-b-" + std::to_string(std::random_device{}()));
  const auto run_b = run_distillation(toy_config(), second);

  CheckpointManager a(first.dir, first.run->config.trainer.save_total_limit);
  CheckpointManager b(second, run_b.config.trainer.save_total_limit);
  bool identical = a.retained_epochs() == b.retained_epochs() && slurp(first.dir / "best") == slurp(second / "best");
  std::size_t files = 0;
  for (int epoch : a.retained_epochs()) {
    for (const char* f : {"manifest.json", "weights.bin", "optimizer.bin"}) {
      identical = identical && slurp(a.path_for(epoch) / f) == slurp(b.path_for(epoch) / f);
      ++files;
    }
  }

  const auto best = a.best_epoch();
  bool round_trip = false;
  std::string loss_detail = "no best marker";
  if (best) {
    const auto ckpt = load_checkpoint(a.path_for(*best));
    const auto& run = *first.run;
    const int eval_batch = run.config.trainer.eval_batch_size > 0 ? run.config.trainer.eval_batch_size
                                                                   : run.config.trainer.batch_size;
    const auto fresh = evaluate(run.teacher, ckpt.model, *ckpt.projection, run.data.eval, run.config.distill, eval_batch);
    round_trip = ckpt.eval_loss == run.report.record(*best).eval.total && fresh.total == ckpt.eval_loss;
    loss_detail = "best ckpt-" + std::to_string(*best) + " stored " + fmt(ckpt.eval_loss, 17) + ", re-evaluated " +
                  fmt(fresh.total, 17);
  }

  bool retention = best.has_value();
  for (const auto* m : {&a, &b}) {
    const auto kept = m->retained_epochs();
    retention = retention && kept.size() <= 3 && m->best_epoch() &&
                std::find(kept.begin(), kept.end(), *m->best_epoch()) != kept.end();
  }

  // Retention when the best checkpoint is an old one.
  if (best) {
    auto ckpt = load_checkpoint(a.path_for(*best));
    const fs::path root = second / "retention";
    CheckpointManager m(root, 3);
    for (int epoch = 0; epoch <= 8; ++epoch) {
      ckpt.epoch = epoch;
      m.save(ckpt, epoch == 1);
      const auto now = m.retained_epochs();
      retention = retention && now.size() <= 3 &&
                  (epoch < 1 || std::find(now.begin(), now.end(), 1) != now.end());
    }
  }

  const auto kept = a.retained_epochs().size();
  std::error_code ec;
  fs::remove_all(first.dir, ec);
  fs::remove_all(second, ec);
  return {identical && round_trip && retention,
          std::string(identical ? "bit-identical" : "DIFFERENT") + " across two runs (" + std::to_string(files) +
              " files); " + loss_detail + "; retained " + std::to_string(kept) +
              " checkpoints with best " + (retention ? "kept" : "MISSING")};
}

Outcome ac8_latency_ordering() {
  const char* order[] = {"afroxlmr-comet", "afroxlmr-mini", "afroxlmr-base", "afroxlmr-large"};
  std::vector<double> p50;
  std::string detail;
  for (const char* name : order) {
    const auto cfg = *preset(name);
    const bool large = cfg.hidden_size >= 1024;
    const auto model = build_model<float>(cfg);
    const auto stats = benchmark_latency(model, 128, 1, 1, large ? 3 : 5, 1);
    p50.push_back(stats.p50_ms);
    detail += std::string(name) + " " + fmt(stats.p50_ms, 4) + " ms  ";
  }
  bool ok = true;
  for (std::size_t i = 1; i < p50.size(); ++i) ok = ok && p50[i - 1] < p50[i];
  return {ok, detail + "(median, L=128, batch 1)"};
}

Outcome ac9_accumulation() {
  auto cfg = toy_config();
  auto data = prepare_data(cfg.data);
  resolve_vocab_sizes(cfg, data.vocab);
  const auto teacher = build_model<float>(cfg.teacher.config);
  const Index len = data.train.length();

  auto train = [&](int batch, int accum) {
    auto student = build_model<float>(cfg.student.config);
    auto proj = init_projection<float>(len, len, cfg.distill.projection_seed);
    TrainerConfig t = cfg.trainer;
    t.batch_size = batch;
    t.grad_accum_steps = accum;
    t.max_steps = 50;
    t.baseline_eval = false;
    t.load_best_at_end = false;
    const auto report = distill_train(teacher, student, proj, data.train, data.eval, cfg.distill, t);
    return std::make_pair(trainable_parameters(student, proj), report.steps);
  };
  const auto [pa, steps_a] = train(4, 2);
  const auto [pb, steps_b] = train(8, 1);
  double sq = 0.0, max_abs = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto d = (pa[i].tensor.values().cast<double>() - pb[i].tensor.values().cast<double>()).eval();
    sq += d.square().sum();
    max_abs = std::max(max_abs, d.abs().maxCoeff());
  }
  const double l2 = std::sqrt(sq);
  return {l2 < 1e-5 && steps_a == 50 && steps_b == 50,
          "L2 parameter distance " + fmt(l2, 3) + " (limit 1e-5), max |diff| " + fmt(max_abs, 3) + ", steps " +
              std::to_string(steps_a) + "/" + std::to_string(steps_b)};
}

}  // namespace

int main() {
  log::set_threshold(log::Level::kError);
  run("AC1", "parameter counts of the reference presets", ac1_parameter_counts);
  run("AC2", "model sizes and parameter reduction", ac2_size_and_reduction);
  run("AC3", "finite-difference check of the hybrid objective", ac3_gradient_check);
  run("AC4", "soft-target and attention loss identities", ac4_loss_identities);
  run("AC5", "toy distillation convergence", ac5_toy_convergence);
  run("AC6", "early-stopping trace and degenerate run", ac6_early_stopping);
  run("AC7", "determinism, checkpoint round trip and retention", ac7_determinism_and_persistence);
  run("AC8", "latency ordering comet < mini < base < large", ac8_latency_ordering);
  run("AC9", "gradient accumulation equivalence", ac9_accumulation);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
