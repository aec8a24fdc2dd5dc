#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "komet/batch.hpp"

namespace komet {

// 64-bit mix of a base seed and a stream index (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

struct CorpusSource {
  std::string path;
  std::string language;                      // optional tag
  std::optional<std::size_t> max_sequences;  // per-file cap
};

// Plain-text sequences, one per non-blank line. languages is parallel to
// sequences (empty strings when untagged).
struct Corpus {
  std::vector<std::string> sequences;
  std::vector<std::string> languages;
  std::size_t dropped_empty = 0;

  std::size_t size() const { return sequences.size(); }
  void push_back(std::string text, std::string language = {});
};

bool is_valid_utf8(std::string_view text);

// Order-preserving concatenation. Blank lines are dropped and counted; a
// missing file raises IoError and malformed UTF-8 raises DecodeError with the
// 1-based line number.
Corpus load_corpus(const std::vector<std::string>& paths);
Corpus load_corpus(const std::vector<CorpusSource>& sources);

// Seeded shuffle then prefix split with floor(fraction * N) training items.
// per_language applies the rule inside each language group, keeping groups in
// first-appearance order.
struct CorpusSplit {
  Corpus train;
  Corpus eval;
};
CorpusSplit split_corpus(const Corpus& corpus, double train_fraction, std::uint64_t seed, bool per_language = false);

enum class TokenMode { kChar, kWhitespace };

std::string to_string(TokenMode mode);
TokenMode parse_token_mode(std::string_view name);

// Char mode splits into UTF-8 code points; whitespace mode splits on runs of
// ASCII whitespace.
std::vector<std::string> split_tokens(std::string_view text, TokenMode mode);

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;

  Vocab() : Vocab(TokenMode::kChar) {}
  explicit Vocab(TokenMode mode);

  // Tokens ordered by first appearance across texts.
  static Vocab build(const std::vector<std::string>& texts, TokenMode mode);
  // Inverse of tokens(): ids 2.. in the given order.
  static Vocab from_tokens(const std::vector<std::string>& tokens, TokenMode mode);

  std::int32_t id(std::string_view token) const;
  const std::string& token(std::int32_t id) const;
  std::int32_t size() const { return static_cast<std::int32_t>(tokens_.size()); }
  TokenMode mode() const { return mode_; }
  // Non-reserved tokens in id order.
  std::vector<std::string> tokens() const;

 private:
  void add(const std::string& token);

  TokenMode mode_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct Encoded {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> mask;
  bool degenerate = false;  // no real tokens
};

// Truncate to max_len, right-pad with kPad; mask marks real tokens.
Encoded tokenize(std::string_view text, const Vocab& vocab, std::int32_t max_len);

// A fixed-length encoded corpus. Degenerate sequences are skipped at encode
// time so every row has at least one real token.
struct TokenDataset {
  IdMatrix token_ids;
  IdMatrix attention_mask;

  Eigen::Index size() const { return token_ids.rows(); }
  Eigen::Index length() const { return token_ids.cols(); }
};

TokenDataset encode_corpus(const Corpus& corpus, const Vocab& vocab, std::int32_t max_len,
                           std::size_t* skipped = nullptr);

// Row indices of each batch in one epoch. The permutation depends on (seed,
// epoch) and never on batch_size, so chunkings of the same epoch agree.
std::vector<std::vector<Eigen::Index>> batch_indices(Eigen::Index count, Eigen::Index batch_size,
                                                     std::uint64_t seed, std::uint64_t epoch, bool shuffle = true);

Batch gather(const TokenDataset& data, std::span<const Eigen::Index> rows);
std::vector<Batch> batches(const TokenDataset& data, Eigen::Index batch_size, std::uint64_t seed,
                           std::uint64_t epoch = 0, bool shuffle = true);

// Three-way sentiment labels: positive=0, negative=1, neutral=2.
constexpr int kNumSentimentClasses = 3;
std::int32_t parse_label(std::string_view name);
const char* label_name(std::int32_t label);

struct LabeledExample {
  std::string id;
  std::string text;
  std::int32_t label = 0;
};

// Tab-separated with the header `ID\tTweet\tLabel`.
std::vector<LabeledExample> load_labeled_tsv(const std::string& path);
void write_labeled_tsv(const std::string& path, const std::vector<LabeledExample>& examples);

}  // namespace komet
