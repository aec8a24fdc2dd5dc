#pragma once

// Tiny double-precision teacher/student pair used to finite-difference the
// whole hybrid objective.

#include <random>
#include <vector>

#include "komet/distillation.hpp"
#include "komet/encoder.hpp"
#include "komet/grad_check.hpp"

namespace komet::oracle {

struct TinyPipeline {
  EncoderModel<double> teacher;
  EncoderModel<double> student;
  ProjectionLayer<double> projection;
  Batch batch;
};

inline void jitter(EncoderModel<double>& model, std::mt19937_64& rng, double amount) {
  std::uniform_real_distribution<double> dist(-amount, amount);
  for (auto& p : model.named_parameters()) {
    auto& v = p.tensor.mutable_values();
    for (Index i = 0; i < v.size(); ++i) v[i] += dist(rng);
  }
}

// L = 4, vocab 7, teacher hidden 16, student hidden 8.
inline TinyPipeline make_tiny_pipeline(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelConfig t;
  t.hidden_size = 16;
  t.num_heads = 2;
  t.num_layers = 2;
  t.intermediate_size = 32;
  t.vocab_size = 7;
  t.max_positions = 4;
  t.seed = seed * 2 + 1;
  ModelConfig s = t;
  s.hidden_size = 8;
  s.intermediate_size = 16;
  s.seed = seed * 2 + 2;

  TinyPipeline p;
  p.teacher = build_model<double>(t);
  p.student = build_model<double>(s);
  jitter(p.teacher, rng, 0.4);
  jitter(p.student, rng, 0.4);
  p.teacher.set_requires_grad(false);
  p.projection = init_projection<double>(4, 4, seed);
  std::uniform_real_distribution<double> w_noise(-0.2, 0.2);
  for (Index i = 0; i < p.projection.weight.size(); ++i) p.projection.weight.mutable_values()[i] += w_noise(rng);

  std::uniform_int_distribution<int> token(2, 6);
  std::uniform_int_distribution<int> length(2, 4);
  p.batch.token_ids = IdMatrix::Zero(2, 4);
  p.batch.attention_mask = IdMatrix::Zero(2, 4);
  for (Index r = 0; r < 2; ++r) {
    const int len = r == 0 ? 4 : length(rng);
    for (Index c = 0; c < len; ++c) {
      p.batch.token_ids(r, c) = token(rng);
      p.batch.attention_mask(r, c) = 1;
    }
  }
  return p;
}

// Max relative FD error of d(total)/d(student params, projection).
inline double hybrid_grad_error(TinyPipeline& p, const DistillationConfig& cfg, double step) {
  std::vector<Tensor<double>> params = p.student.parameters();
  params.push_back(p.projection.weight);
  auto loss = [&]() { return distillation_objective(p.teacher, p.student, p.projection, p.batch, cfg).total; };
  return grad_check<double>(loss, std::span<Tensor<double>>(params), step);
}

}  // namespace komet::oracle
