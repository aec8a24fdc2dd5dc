#include "komet/synthetic.hpp"

#include <numeric>
#include <random>

#include "komet/adamw.hpp"
#include "komet/errors.hpp"
#include "komet/log.hpp"

namespace komet {

std::string symbol_alphabet(int n) {
  static const std::string all = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";
  if (n < 1 || n > static_cast<int>(all.size())) throw ConfigError("symbol_alphabet: need 1..62 symbols");
  return all.substr(0, static_cast<std::size_t>(n));
}

Corpus markov_corpus(std::size_t count, std::uint64_t seed, const MarkovSpec& spec) {
  if (spec.min_length < 1 || spec.max_length < spec.min_length) throw ConfigError("markov_corpus: bad length range");
  if (spec.successors < 1 || spec.successors > spec.symbols) throw ConfigError("markov_corpus: bad successor count");
  const std::string alphabet = symbol_alphabet(spec.symbols);
  std::mt19937_64 rng(seed);
  const auto n = static_cast<std::size_t>(spec.symbols);

  std::vector<std::vector<double>> transition(n, std::vector<double>(n, (1.0 - spec.follow_prob) / static_cast<double>(n)));
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    // Decreasing preference among the followers.
    double weight_total = 0.0;
    for (int k = 0; k < spec.successors; ++k) weight_total += 1.0 / (k + 1);
    for (int k = 0; k < spec.successors; ++k) {
      transition[s][order[static_cast<std::size_t>(k)]] += spec.follow_prob * (1.0 / (k + 1)) / weight_total;
    }
  }

  std::uniform_int_distribution<int> length(spec.min_length, spec.max_length);
  std::uniform_int_distribution<std::size_t> start(0, n - 1);
  Corpus corpus;
  for (std::size_t i = 0; i < count; ++i) {
    const int len = length(rng);
    std::string text;
    std::size_t state = start(rng);
    for (int k = 0; k < len; ++k) {
      text.push_back(alphabet[state]);
      std::discrete_distribution<std::size_t> next(transition[state].begin(), transition[state].end());
      state = next(rng);
    }
    corpus.push_back(std::move(text));
  }
  return corpus;
}

std::vector<LabeledExample> separable_labeled_set(std::size_t count, std::uint64_t seed) {
  static const char* alphabets[kNumSentimentClasses] = {"abcdefgh", "ijklmnop", "qrstuvwx"};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> label(0, kNumSentimentClasses - 1);
  std::uniform_int_distribution<int> length(6, 12);
  std::uniform_int_distribution<int> letter(0, 7);
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < count; ++i) {
    LabeledExample ex;
    ex.id = std::to_string(i + 1);
    ex.label = label(rng);
    const int len = length(rng);
    for (int k = 0; k < len; ++k) ex.text.push_back(alphabets[ex.label][letter(rng)]);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<double> pretrain_next_token(EncoderModel<float>& model, const TokenDataset& data,
                                        const PretrainConfig& cfg) {
  if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0)) {
    throw ConfigError("pretrain: epochs >= 0, batch_size >= 1 and learning_rate > 0 are required");
  }
  if (data.size() == 0) throw ConfigError("pretrain: empty dataset");
  const auto params = model.named_parameters();
  model.set_requires_grad(true);
  AdamWState state;
  std::vector<double> losses;
  ForwardOptions opts;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double total = 0.0;
    Index count = 0;
    for (const auto& rows : batch_indices(data.size(), cfg.batch_size, cfg.seed, static_cast<std::uint64_t>(epoch))) {
      const Batch batch = gather(data, rows);
      const Index b = batch.size();
      const Index len = batch.length();
      std::vector<std::int32_t> labels(static_cast<std::size_t>(b * len), -1);
      for (Index r = 0; r < b; ++r) {
        for (Index c = 0; c + 1 < len; ++c) {
          if (batch.attention_mask(r, c) && batch.attention_mask(r, c + 1)) {
            labels[static_cast<std::size_t>(r * len + c)] = batch.token_ids(r, c + 1);
          }
        }
      }
      auto out = forward(model, batch, opts);
      auto loss = label_cross_entropy(reshape(out.logits, {b * len, model.config.vocab_size}),
                                      std::span<const std::int32_t>(labels));
      loss.backward();
      adamw_step(params, state, cfg.learning_rate);
      model.zero_grad();
      total += static_cast<double>(loss.item());
      ++count;
    }
    losses.push_back(total / static_cast<double>(count));
    log::debug("pretrain epoch ", epoch, " loss ", losses.back());
  }
  return losses;
}

}  // namespace komet
