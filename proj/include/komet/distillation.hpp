#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "komet/batch.hpp"
#include "komet/encoder.hpp"
#include "komet/errors.hpp"
#include "komet/ops.hpp"
#include "komet/tensor.hpp"

namespace komet {

enum class SoftLossMode { kCrossEntropy, kKl };

struct DistillationConfig {
  double temperature = 2.0;
  double alpha = 0.5;
  double epsilon = 1e-8;
  SoftLossMode loss_mode = SoftLossMode::kCrossEntropy;
  bool t_squared_scaling = false;
  // Restrict the soft-target average to unpadded positions.
  bool mask_soft_targets = false;
  // When false the objective is the soft-target loss alone.
  bool use_attention = true;
  std::uint64_t projection_seed = 0;
};

inline void validate(const DistillationConfig& cfg) {
  if (!(cfg.temperature > 0.0)) throw ConfigError("distill.temperature must be > 0");
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw ConfigError("distill.alpha must lie in [0, 1]");
  if (!(cfg.epsilon >= 0.0)) throw ConfigError("distill.epsilon must be >= 0");
}

// Learned map from flattened student attention [*, Ls^2] to the teacher's
// [*, Lt^2]; weight is [Lt^2, Ls^2] and there is no bias.
template <typename Scalar>
struct ProjectionLayer {
  Tensor<Scalar> weight;
  Index student_length = 0;
  Index teacher_length = 0;
};

// Identity when the lengths agree, otherwise uniform in [-1/Ls, 1/Ls].
template <typename Scalar>
ProjectionLayer<Scalar> init_projection(Index student_length, Index teacher_length, std::uint64_t seed) {
  if (student_length < 1 || teacher_length < 1) throw ConfigError("init_projection: lengths must be positive");
  const Index in = student_length * student_length;
  const Index out = teacher_length * teacher_length;
  typename Tensor<Scalar>::Array w(in * out);
  if (student_length == teacher_length) {
    w.setZero();
    for (Index i = 0; i < in; ++i) w[i * in + i] = Scalar(1);
  } else {
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / static_cast<double>(student_length);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(dist(rng));
  }
  ProjectionLayer<Scalar> p;
  p.weight = Tensor<Scalar>({out, in}, std::move(w), true);
  p.student_length = student_length;
  p.teacher_length = teacher_length;
  return p;
}

struct LossBreakdown {
  double distill = 0.0;
  std::optional<double> attention;
  double total = 0.0;
};

// Mean -sum P log P over rows of a probability tensor (0 log 0 = 0).
template <typename Scalar>
double mean_entropy(const Tensor<Scalar>& p, std::span<const Scalar> row_weights = {}) {
  const Index classes = p.dim(-1);
  const Index rows = p.size() / classes;
  double total = 0.0;
  double weight_total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const double w = row_weights.empty() ? 1.0 : static_cast<double>(row_weights[static_cast<std::size_t>(r)]);
    double h = 0.0;
    for (Index j = 0; j < classes; ++j) {
      const double v = static_cast<double>(p.values()[r * classes + j]);
      if (v > 0.0) h -= v * std::log(v);
    }
    total += w * h;
    weight_total += w;
  }
  return total / weight_total;
}

// Soft-target loss between temperature-softened teacher and student
// distributions over the last axis. Cross-entropy mode is the literal
// -sum P_T log(P_S + eps); KL mode subtracts the teacher entropy, which
// changes the value by a constant and leaves the gradient untouched.
template <typename Scalar>
Tensor<Scalar> soft_target_loss(const Tensor<Scalar>& teacher_logits, const Tensor<Scalar>& student_logits,
                                const DistillationConfig& cfg, const IdMatrix* mask = nullptr) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw DimensionError("soft_target_loss: teacher logits " + to_string(teacher_logits.shape()) +
                         " vs student logits " + to_string(student_logits.shape()));
  }
  validate(cfg);
  const Tensor<Scalar> p_teacher = softmax_t(teacher_logits.detach(), -1, cfg.temperature);
  const Tensor<Scalar> p_student = softmax_t(student_logits, -1, cfg.temperature);

  std::vector<Scalar> weights;
  if (cfg.mask_soft_targets && mask != nullptr) {
    const Index rows = student_logits.size() / student_logits.dim(-1);
    if (mask->size() != rows) throw DimensionError("soft_target_loss: mask does not cover every logit row");
    weights.resize(static_cast<std::size_t>(rows));
    for (Index i = 0; i < rows; ++i) weights[static_cast<std::size_t>(i)] = static_cast<Scalar>(mask->data()[i]);
  }
  const std::span<const Scalar> row_weights(weights);
  Tensor<Scalar> loss = soft_cross_entropy(p_teacher, p_student, cfg.epsilon, row_weights);
  if (cfg.loss_mode == SoftLossMode::kKl) {
    const double entropy = mean_entropy(p_teacher, row_weights);
    loss = sub(loss, Tensor<Scalar>::scalar(static_cast<Scalar>(entropy)));
  }
  if (cfg.t_squared_scaling) loss = scale(loss, static_cast<Scalar>(cfg.temperature * cfg.temperature));
  return loss;
}

// Head-mean of [b, H, L, L] attention probabilities.
template <typename Scalar>
Tensor<Scalar> pool_attention(const Tensor<Scalar>& per_head) {
  if (per_head.rank() != 4) {
    throw DimensionError("pool_attention: expected [batch, heads, L, L], got " + to_string(per_head.shape()));
  }
  return mean_axis(per_head, 1);
}

// MSE between the projected flattened student map and the flattened teacher
// map. Gradients reach the student map and the projection, never the teacher.
template <typename Scalar>
Tensor<Scalar> attention_loss(const Tensor<Scalar>& student_map, const Tensor<Scalar>& teacher_map,
                              const ProjectionLayer<Scalar>& proj) {
  if (student_map.rank() != 3 || teacher_map.rank() != 3 || student_map.dim(1) != student_map.dim(2) ||
      teacher_map.dim(1) != teacher_map.dim(2)) {
    throw DimensionError("attention_loss: maps must be [batch, L, L], got " + to_string(student_map.shape()) +
                         " and " + to_string(teacher_map.shape()));
  }
  if (student_map.dim(0) != teacher_map.dim(0)) {
    throw DimensionError("attention_loss: batch sizes differ: " + to_string(student_map.shape()) + " vs " +
                         to_string(teacher_map.shape()));
  }
  const Index ls = student_map.dim(1);
  const Index lt = teacher_map.dim(1);
  if (proj.weight.dim(1) != ls * ls || proj.weight.dim(0) != lt * lt) {
    throw ConfigError("attention_loss: projection " + to_string(proj.weight.shape()) + " cannot map L=" +
                      std::to_string(ls) + " to L=" + std::to_string(lt));
  }
  auto projected = linear_nt(flatten_trailing(student_map), proj.weight);
  return mse(projected, flatten_trailing(teacher_map).detach());
}

// alpha * distill + (1 - alpha) * attention; distill alone without attention.
inline LossBreakdown hybrid_loss(double distill, std::optional<double> attention, const DistillationConfig& cfg) {
  LossBreakdown out;
  out.distill = distill;
  out.attention = attention;
  out.total = attention ? cfg.alpha * distill + (1.0 - cfg.alpha) * *attention : distill;
  return out;
}

template <typename Scalar>
Tensor<Scalar> hybrid_loss(const Tensor<Scalar>& distill, const Tensor<Scalar>* attention,
                           const DistillationConfig& cfg) {
  if (attention == nullptr || !attention->defined()) return distill;
  return add(scale(distill, static_cast<Scalar>(cfg.alpha)), scale(*attention, static_cast<Scalar>(1.0 - cfg.alpha)));
}

template <typename Scalar>
struct ObjectiveTerms {
  Tensor<Scalar> distill;
  Tensor<Scalar> attention;  // undefined when attention matching is off
  Tensor<Scalar> total;
  LossBreakdown breakdown;
};

// One evaluation of the hybrid objective on a batch: frozen teacher forward,
// student forward with attention, soft-target loss on the LM logits, and
// projected head-mean attention matching on the final layer.
template <typename Scalar>
ObjectiveTerms<Scalar> distillation_objective(const EncoderModel<Scalar>& teacher, const EncoderModel<Scalar>& student,
                                              const ProjectionLayer<Scalar>& proj, const Batch& batch,
                                              const DistillationConfig& cfg) {
  ForwardOptions opts;
  opts.collect_attention = cfg.use_attention;
  EncoderOutput<Scalar> t_out;
  {
    NoGradGuard no_grad;
    t_out = forward(teacher, batch, opts);
  }
  auto s_out = forward(student, batch, opts);

  ObjectiveTerms<Scalar> terms;
  terms.distill = soft_target_loss(t_out.logits, s_out.logits, cfg, &batch.attention_mask);
  std::optional<double> attention_value;
  if (cfg.use_attention && !t_out.attentions.empty() && !s_out.attentions.empty()) {
    terms.attention = attention_loss(s_out.attentions.back().pooled, t_out.attentions.back().pooled, proj);
    attention_value = static_cast<double>(terms.attention.item());
  }
  terms.total = hybrid_loss(terms.distill, terms.attention.defined() ? &terms.attention : nullptr, cfg);
  terms.breakdown = hybrid_loss(static_cast<double>(terms.distill.item()), attention_value, cfg);
  terms.breakdown.total = static_cast<double>(terms.total.item());
  return terms;
}

}  // namespace komet
