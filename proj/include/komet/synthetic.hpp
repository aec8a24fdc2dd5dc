#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "komet/data.hpp"
#include "komet/encoder.hpp"

namespace komet {

// First n characters of 0-9A-Za-z (n <= 62).
std::string symbol_alphabet(int n);

// Character sequences from a sparse first-order Markov chain: each symbol
// has `successors` preferred followers taking `follow_prob` of the mass, the
// rest spread uniformly.
struct MarkovSpec {
  int symbols = 62;
  int min_length = 10;
  int max_length = 16;
  int successors = 3;
  double follow_prob = 0.9;
};

Corpus markov_corpus(std::size_t count, std::uint64_t seed, const MarkovSpec& spec = {});

// Three classes, each drawing characters from its own disjoint 8-letter
// alphabet, so bag-of-characters features separate them linearly.
std::vector<LabeledExample> separable_labeled_set(std::size_t count, std::uint64_t seed);

// Hard-label next-token pretraining, used to give a toy teacher peaked
// outputs. epochs == 0 disables it.
struct PretrainConfig {
  int epochs = 0;
  double learning_rate = 1e-3;
  int batch_size = 16;
  std::uint64_t seed = 0;
};

// Trains every position whose successor is a real token to predict that
// successor id. Returns the mean loss of each epoch.
std::vector<double> pretrain_next_token(EncoderModel<float>& model, const TokenDataset& data,
                                        const PretrainConfig& cfg);

}  // namespace komet
