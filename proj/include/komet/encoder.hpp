#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "komet/batch.hpp"
#include "komet/errors.hpp"
#include "komet/model_config.hpp"
#include "komet/ops.hpp"
#include "komet/tensor.hpp"

namespace komet {

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

// Linear weights are stored input-major ([in, out]) so that a forward pass
// is x · W + b with no transpose.
template <typename Scalar>
struct EncoderLayer {
  Tensor<Scalar> query_w, query_b;
  Tensor<Scalar> key_w, key_b;
  Tensor<Scalar> value_w, value_b;
  Tensor<Scalar> attn_out_w, attn_out_b;
  Tensor<Scalar> attn_norm_gain, attn_norm_shift;
  Tensor<Scalar> ff_in_w, ff_in_b;
  Tensor<Scalar> ff_out_w, ff_out_b;
  Tensor<Scalar> out_norm_gain, out_norm_shift;
};

// Post-norm transformer encoder with learned positions and an LM head tied
// to the word embeddings.
template <typename Scalar>
struct EncoderModel {
  ModelConfig config;
  Tensor<Scalar> word_embeddings;      // [vocab, hidden]
  Tensor<Scalar> position_embeddings;  // [max_positions, hidden]
  Tensor<Scalar> type_embeddings;      // [type_vocab, hidden]
  Tensor<Scalar> embed_norm_gain, embed_norm_shift;
  std::vector<EncoderLayer<Scalar>> layers;
  Tensor<Scalar> pooler_w, pooler_b;  // undefined without a pooler

  // Stable order; used for initialization, checkpoints and optimizers.
  std::vector<NamedTensor<Scalar>> named_parameters() const {
    std::vector<NamedTensor<Scalar>> out;
    out.push_back({"embeddings.word", word_embeddings});
    out.push_back({"embeddings.position", position_embeddings});
    out.push_back({"embeddings.type", type_embeddings});
    out.push_back({"embeddings.norm.gain", embed_norm_gain});
    out.push_back({"embeddings.norm.shift", embed_norm_shift});
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layer." + std::to_string(i) + ".";
      const auto& l = layers[i];
      out.push_back({p + "attention.query.weight", l.query_w});
      out.push_back({p + "attention.query.bias", l.query_b});
      out.push_back({p + "attention.key.weight", l.key_w});
      out.push_back({p + "attention.key.bias", l.key_b});
      out.push_back({p + "attention.value.weight", l.value_w});
      out.push_back({p + "attention.value.bias", l.value_b});
      out.push_back({p + "attention.output.weight", l.attn_out_w});
      out.push_back({p + "attention.output.bias", l.attn_out_b});
      out.push_back({p + "attention.norm.gain", l.attn_norm_gain});
      out.push_back({p + "attention.norm.shift", l.attn_norm_shift});
      out.push_back({p + "ffn.in.weight", l.ff_in_w});
      out.push_back({p + "ffn.in.bias", l.ff_in_b});
      out.push_back({p + "ffn.out.weight", l.ff_out_w});
      out.push_back({p + "ffn.out.bias", l.ff_out_b});
      out.push_back({p + "ffn.norm.gain", l.out_norm_gain});
      out.push_back({p + "ffn.norm.shift", l.out_norm_shift});
    }
    if (config.with_pooler) {
      out.push_back({"pooler.weight", pooler_w});
      out.push_back({"pooler.bias", pooler_b});
    }
    return out;
  }

  std::vector<Tensor<Scalar>> parameters() const {
    std::vector<Tensor<Scalar>> out;
    for (auto& p : named_parameters()) out.push_back(p.tensor);
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.size();
    return n;
  }

  void set_requires_grad(bool flag) {
    for (auto& p : named_parameters()) p.tensor.set_requires_grad(flag);
  }

  void zero_grad() {
    for (auto& p : named_parameters()) p.tensor.zero_grad();
  }

  // Deep copy with independent storage.
  EncoderModel clone() const {
    EncoderModel copy = *this;
    copy.word_embeddings = word_embeddings.clone();
    copy.position_embeddings = position_embeddings.clone();
    copy.type_embeddings = type_embeddings.clone();
    copy.embed_norm_gain = embed_norm_gain.clone();
    copy.embed_norm_shift = embed_norm_shift.clone();
    for (auto& l : copy.layers) {
      for (Tensor<Scalar>* t : {&l.query_w, &l.query_b, &l.key_w, &l.key_b, &l.value_w, &l.value_b, &l.attn_out_w,
                                &l.attn_out_b, &l.attn_norm_gain, &l.attn_norm_shift, &l.ff_in_w, &l.ff_in_b,
                                &l.ff_out_w, &l.ff_out_b, &l.out_norm_gain, &l.out_norm_shift}) {
        *t = t->clone();
      }
    }
    if (config.with_pooler) {
      copy.pooler_w = pooler_w.clone();
      copy.pooler_b = pooler_b.clone();
    }
    return copy;
  }

  // Same-precision or cross-precision copy of all weights into a new model.
  template <typename Other>
  EncoderModel<Other> cast() const;
};

// Attention probabilities of one layer: heads, head-mean, and row-major flat.
template <typename Scalar>
struct AttentionMap {
  Tensor<Scalar> per_head;  // [b, H, L, L]
  Tensor<Scalar> pooled;    // [b, L, L]
  Tensor<Scalar> flat;      // [b, L*L]
};

struct ForwardOptions {
  bool collect_attention = false;
  bool compute_logits = true;
  bool compute_pooler = false;
};

template <typename Scalar>
struct EncoderOutput {
  Tensor<Scalar> hidden;  // [b, L, hidden]
  Tensor<Scalar> logits;  // [b, L, vocab] when computed
  Tensor<Scalar> pooled;  // [b, hidden] when computed and the model has a pooler
  std::vector<AttentionMap<Scalar>> attentions;
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> normal_tensor(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  typename Tensor<Scalar>::Array values(numel(shape));
  for (Index i = 0; i < values.size(); ++i) values[i] = static_cast<Scalar>(dist(rng));
  return Tensor<Scalar>(std::move(shape), std::move(values), true);
}

}  // namespace detail

// Weights ~ N(0, 0.02^2) from `config.seed`, biases zero, norm gains one.
template <typename Scalar>
EncoderModel<Scalar> build_model(const ModelConfig& config) {
  validate(config);
  std::mt19937_64 rng(config.seed);
  const Index h = config.hidden_size;
  const Index ff = config.intermediate_size;
  constexpr double kStd = 0.02;
  auto weight = [&](Shape s) { return detail::normal_tensor<Scalar>(std::move(s), rng, kStd); };
  auto zeros = [](Index n) { return Tensor<Scalar>::zeros({n}, true); };
  auto ones = [](Index n) { return Tensor<Scalar>::ones({n}, true); };

  EncoderModel<Scalar> m;
  m.config = config;
  m.word_embeddings = weight({config.vocab_size, h});
  m.position_embeddings = weight({config.max_positions, h});
  m.type_embeddings = weight({config.type_vocab_size, h});
  m.embed_norm_gain = ones(h);
  m.embed_norm_shift = zeros(h);
  for (std::int64_t i = 0; i < config.num_layers; ++i) {
    EncoderLayer<Scalar> l;
    l.query_w = weight({h, h});
    l.query_b = zeros(h);
    l.key_w = weight({h, h});
    l.key_b = zeros(h);
    l.value_w = weight({h, h});
    l.value_b = zeros(h);
    l.attn_out_w = weight({h, h});
    l.attn_out_b = zeros(h);
    l.attn_norm_gain = ones(h);
    l.attn_norm_shift = zeros(h);
    l.ff_in_w = weight({h, ff});
    l.ff_in_b = zeros(ff);
    l.ff_out_w = weight({ff, h});
    l.ff_out_b = zeros(h);
    l.out_norm_gain = ones(h);
    l.out_norm_shift = zeros(h);
    m.layers.push_back(std::move(l));
  }
  if (config.with_pooler) {
    m.pooler_w = weight({h, h});
    m.pooler_b = zeros(h);
  }
  return m;
}

template <typename Scalar>
template <typename Other>
EncoderModel<Other> EncoderModel<Scalar>::cast() const {
  ModelConfig c = config;
  EncoderModel<Other> out = build_model<Other>(c);
  auto src = named_parameters();
  auto dst = out.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i].tensor.mutable_values() = src[i].tensor.values().template cast<Other>();
    dst[i].tensor.set_requires_grad(src[i].tensor.requires_grad());
  }
  return out;
}

namespace detail {

inline void check_inputs(const ModelConfig& config, const IdMatrix& ids, const IdMatrix& mask) {
  if (ids.rows() < 1 || ids.cols() < 1) throw InputError("forward: empty token matrix");
  if (mask.rows() != ids.rows() || mask.cols() != ids.cols()) {
    throw InputError("forward: attention mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                     " but tokens are " + std::to_string(ids.rows()) + "x" + std::to_string(ids.cols()));
  }
  if (ids.cols() > config.max_positions) {
    throw InputError("forward: sequence length " + std::to_string(ids.cols()) + " exceeds max_positions " +
                     std::to_string(config.max_positions));
  }
  for (Index r = 0; r < ids.rows(); ++r) {
    bool any = false;
    for (Index c = 0; c < ids.cols(); ++c) {
      const auto id = ids(r, c);
      if (id < 0 || id >= config.vocab_size) {
        throw InputError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(config.vocab_size));
      }
      const auto v = mask(r, c);
      if (v != 0 && v != 1) throw InputError("forward: attention mask entries must be 0 or 1");
      any = any || v == 1;
    }
    if (!any) throw InputError("forward: sequence " + std::to_string(r) + " is fully masked");
  }
}

// [b, L, hidden] -> [b, heads, L, head_dim]
template <typename Scalar>
Tensor<Scalar> split_heads(const Tensor<Scalar>& x, Index heads) {
  const Index b = x.dim(0);
  const Index len = x.dim(1);
  return permute(reshape(x, {b, len, heads, x.dim(2) / heads}), {0, 2, 1, 3});
}

template <typename Scalar>
Tensor<Scalar> merge_heads(const Tensor<Scalar>& x) {
  const Index b = x.dim(0);
  const Index len = x.dim(2);
  return reshape(permute(x, {0, 2, 1, 3}), {b, len, x.dim(1) * x.dim(3)});
}

}  // namespace detail

template <typename Scalar>
EncoderOutput<Scalar> forward(const EncoderModel<Scalar>& model, const IdMatrix& token_ids,
                              const IdMatrix& attention_mask, const ForwardOptions& options = {}) {
  const auto& cfg = model.config;
  detail::check_inputs(cfg, token_ids, attention_mask);
  const Index b = token_ids.rows();
  const Index len = token_ids.cols();
  const Index heads = cfg.num_heads;

  std::vector<std::int32_t> positions(static_cast<std::size_t>(len));
  for (Index i = 0; i < len; ++i) positions[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i);
  const std::int32_t type_zero = 0;

  auto x = embedding_lookup(model.word_embeddings, std::span<const std::int32_t>(token_ids.data(), token_ids.size()),
                            {b, len});
  x = add(x, embedding_lookup(model.position_embeddings, std::span<const std::int32_t>(positions), {len}));
  x = add(x, embedding_lookup(model.type_embeddings, std::span<const std::int32_t>(&type_zero, 1), {1}));
  x = layer_norm(x, model.embed_norm_gain, model.embed_norm_shift, cfg.layer_norm_eps);

  typename Tensor<Scalar>::Array bias_values(b * len);
  for (Index r = 0; r < b; ++r) {
    for (Index c = 0; c < len; ++c) bias_values[r * len + c] = attention_mask(r, c) ? Scalar(0) : Scalar(-1e9);
  }
  const Tensor<Scalar> mask_bias({b, 1, 1, len}, std::move(bias_values));
  const Scalar score_scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));

  EncoderOutput<Scalar> out;
  for (const auto& layer : model.layers) {
    auto q = detail::split_heads(linear(x, layer.query_w, &layer.query_b), heads);
    auto k = detail::split_heads(linear(x, layer.key_w, &layer.key_b), heads);
    auto v = detail::split_heads(linear(x, layer.value_w, &layer.value_b), heads);
    auto scores = add(scale(matmul(q, transpose_last2(k)), score_scale), mask_bias);
    auto probs = softmax_t(scores, -1, 1.0);
    auto context = detail::merge_heads(matmul(probs, v));
    auto attended = linear(context, layer.attn_out_w, &layer.attn_out_b);
    x = layer_norm(add(x, attended), layer.attn_norm_gain, layer.attn_norm_shift, cfg.layer_norm_eps);
    auto inner = gelu(linear(x, layer.ff_in_w, &layer.ff_in_b));
    auto projected = linear(inner, layer.ff_out_w, &layer.ff_out_b);
    x = layer_norm(add(x, projected), layer.out_norm_gain, layer.out_norm_shift, cfg.layer_norm_eps);
    if (options.collect_attention) {
      AttentionMap<Scalar> map;
      map.per_head = probs;
      map.pooled = mean_axis(probs, 1);
      map.flat = flatten_trailing(map.pooled);
      out.attentions.push_back(std::move(map));
    }
  }
  out.hidden = x;
  if (options.compute_logits) out.logits = linear_nt(x, model.word_embeddings);
  if (options.compute_pooler && cfg.with_pooler) {
    out.pooled = tanh(linear(select(x, 1, 0), model.pooler_w, &model.pooler_b));
  }
  return out;
}

template <typename Scalar>
EncoderOutput<Scalar> forward(const EncoderModel<Scalar>& model, const Batch& batch, const ForwardOptions& options = {}) {
  return forward(model, batch.token_ids, batch.attention_mask, options);
}

}  // namespace komet
