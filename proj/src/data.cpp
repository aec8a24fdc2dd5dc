#include "komet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "komet/errors.hpp"
#include "komet/log.hpp"

namespace komet {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void Corpus::push_back(std::string text, std::string language) {
  sequences.push_back(std::move(text));
  languages.push_back(std::move(language));
}

bool is_valid_utf8(std::string_view text) {
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t extra = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= n) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(text[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    // Overlong forms, surrogates and out-of-range code points.
    if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) || (extra == 3 && cp < 0x10000)) return false;
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += extra + 1;
  }
  return true;
}

namespace {

bool is_blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(),
                     [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' || c == '\f'; });
}

}  // namespace

Corpus load_corpus(const std::vector<std::string>& paths) {
  std::vector<CorpusSource> sources;
  for (const auto& p : paths) sources.push_back({p, {}, std::nullopt});
  return load_corpus(sources);
}

Corpus load_corpus(const std::vector<CorpusSource>& sources) {
  Corpus corpus;
  for (const auto& source : sources) {
    std::ifstream in(source.path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file: " + source.path);
    std::string line;
    std::size_t line_number = 0;
    std::size_t kept = 0;
    while (std::getline(in, line)) {
      ++line_number;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!is_valid_utf8(line)) {
        throw DecodeError(source.path + ":" + std::to_string(line_number) + ": invalid UTF-8");
      }
      if (is_blank(line)) {
        ++corpus.dropped_empty;
        continue;
      }
      if (source.max_sequences && kept >= *source.max_sequences) continue;
      corpus.push_back(line, source.language);
      ++kept;
    }
  }
  if (corpus.dropped_empty > 0) log::info("corpus: dropped ", corpus.dropped_empty, " empty line(s)");
  return corpus;
}

namespace {

void split_group(const Corpus& corpus, std::vector<std::size_t> members, double fraction, std::uint64_t seed,
                 CorpusSplit& out) {
  std::mt19937_64 rng(seed);
  std::shuffle(members.begin(), members.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(members.size())));
  for (std::size_t i = 0; i < members.size(); ++i) {
    const auto idx = members[i];
    (i < n_train ? out.train : out.eval).push_back(corpus.sequences[idx], corpus.languages[idx]);
  }
}

}  // namespace

CorpusSplit split_corpus(const Corpus& corpus, double train_fraction, std::uint64_t seed, bool per_language) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("data.train_fraction must lie strictly between 0 and 1");
  }
  if (corpus.size() < 2) throw ConfigError("split_corpus: need at least 2 sequences, got " + std::to_string(corpus.size()));
  CorpusSplit out;
  if (!per_language) {
    std::vector<std::size_t> all(corpus.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    split_group(corpus, std::move(all), train_fraction, seed, out);
    return out;
  }
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& lang = corpus.languages[i];
    if (!groups.count(lang)) order.push_back(lang);
    groups[lang].push_back(i);
  }
  for (std::size_t g = 0; g < order.size(); ++g) {
    split_group(corpus, groups[order[g]], train_fraction, mix_seed(seed, g), out);
  }
  return out;
}

std::string to_string(TokenMode mode) { return mode == TokenMode::kChar ? "char" : "whitespace"; }

TokenMode parse_token_mode(std::string_view name) {
  if (name == "char") return TokenMode::kChar;
  if (name == "whitespace") return TokenMode::kWhitespace;
  throw ConfigError("data.tokenizer must be \"char\" or \"whitespace\", got \"" + std::string(name) + "\"");
}

std::vector<std::string> split_tokens(std::string_view text, TokenMode mode) {
  std::vector<std::string> out;
  if (mode == TokenMode::kChar) {
    std::size_t i = 0;
    while (i < text.size()) {
      const auto c = static_cast<unsigned char>(text[i]);
      std::size_t len = 1;
      if ((c & 0xE0) == 0xC0) len = 2;
      else if ((c & 0xF0) == 0xE0) len = 3;
      else if ((c & 0xF8) == 0xF0) len = 4;
      len = std::min(len, text.size() - i);
      out.emplace_back(text.substr(i, len));
      i += len;
    }
    return out;
  }
  std::size_t i = 0;
  auto space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' || c == '\f'; };
  while (i < text.size()) {
    while (i < text.size() && space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !space(text[i])) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

Vocab::Vocab(TokenMode mode) : mode_(mode) {
  tokens_ = {"<pad>", "<unk>"};
}

void Vocab::add(const std::string& token) {
  if (index_.count(token)) return;
  index_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
  tokens_.push_back(token);
}

Vocab Vocab::build(const std::vector<std::string>& texts, TokenMode mode) {
  Vocab v(mode);
  for (const auto& t : texts) {
    for (const auto& tok : split_tokens(t, mode)) v.add(tok);
  }
  return v;
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens, TokenMode mode) {
  Vocab v(mode);
  for (const auto& t : tokens) {
    if (v.index_.count(t)) throw DataError("vocabulary token repeated: \"" + t + "\"");
    v.add(t);
  }
  return v;
}

std::int32_t Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || id >= size()) throw InputError("vocabulary id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocab::tokens() const { return {tokens_.begin() + 2, tokens_.end()}; }

Encoded tokenize(std::string_view text, const Vocab& vocab, std::int32_t max_len) {
  if (max_len < 1) throw ConfigError("data.max_length must be >= 1");
  Encoded e;
  e.ids.assign(static_cast<std::size_t>(max_len), Vocab::kPad);
  e.mask.assign(static_cast<std::size_t>(max_len), 0);
  std::size_t n = 0;
  for (const auto& tok : split_tokens(text, vocab.mode())) {
    if (n == static_cast<std::size_t>(max_len)) break;
    e.ids[n] = vocab.id(tok);
    e.mask[n] = 1;
    ++n;
  }
  e.degenerate = n == 0;
  return e;
}

TokenDataset encode_corpus(const Corpus& corpus, const Vocab& vocab, std::int32_t max_len, std::size_t* skipped) {
  std::vector<Encoded> rows;
  std::size_t dropped = 0;
  for (const auto& s : corpus.sequences) {
    auto e = tokenize(s, vocab, max_len);
    if (e.degenerate) {
      ++dropped;
      continue;
    }
    rows.push_back(std::move(e));
  }
  if (skipped != nullptr) *skipped = dropped;
  TokenDataset d;
  d.token_ids.resize(static_cast<Eigen::Index>(rows.size()), max_len);
  d.attention_mask.resize(static_cast<Eigen::Index>(rows.size()), max_len);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::int32_t c = 0; c < max_len; ++c) {
      d.token_ids(static_cast<Eigen::Index>(r), c) = rows[r].ids[static_cast<std::size_t>(c)];
      d.attention_mask(static_cast<Eigen::Index>(r), c) = rows[r].mask[static_cast<std::size_t>(c)];
    }
  }
  return d;
}

std::vector<std::vector<Eigen::Index>> batch_indices(Eigen::Index count, Eigen::Index batch_size, std::uint64_t seed,
                                                     std::uint64_t epoch, bool shuffle) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  if (shuffle) {
    std::mt19937_64 rng(mix_seed(seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<Eigen::Index>> out;
  for (Eigen::Index start = 0; start < count; start += batch_size) {
    const Eigen::Index end = std::min(count, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

Batch gather(const TokenDataset& data, std::span<const Eigen::Index> rows) {
  Batch b;
  const auto n = static_cast<Eigen::Index>(rows.size());
  b.token_ids.resize(n, data.length());
  b.attention_mask.resize(n, data.length());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = rows[static_cast<std::size_t>(i)];
    if (r < 0 || r >= data.size()) throw InputError("gather: row " + std::to_string(r) + " out of range");
    b.token_ids.row(i) = data.token_ids.row(r);
    b.attention_mask.row(i) = data.attention_mask.row(r);
  }
  return b;
}

std::vector<Batch> batches(const TokenDataset& data, Eigen::Index batch_size, std::uint64_t seed, std::uint64_t epoch,
                           bool shuffle) {
  std::vector<Batch> out;
  for (const auto& rows : batch_indices(data.size(), batch_size, seed, epoch, shuffle)) {
    out.push_back(gather(data, rows));
  }
  return out;
}

std::int32_t parse_label(std::string_view name) {
  if (name == "positive") return 0;
  if (name == "negative") return 1;
  if (name == "neutral") return 2;
  throw DataError("unknown label \"" + std::string(name) + "\" (expected positive, negative or neutral)");
}

const char* label_name(std::int32_t label) {
  switch (label) {
    case 0: return "positive";
    case 1: return "negative";
    case 2: return "neutral";
    default: throw DataError("label id out of range: " + std::to_string(label));
  }
}

std::vector<LabeledExample> load_labeled_tsv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open labeled file: " + path);
  std::string line;
  std::size_t line_number = 1;
  if (!std::getline(in, line)) throw DataError(path + ": empty file, expected header ID\\tTweet\\tLabel");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "ID\tTweet\tLabel") throw DataError(path + ":1: header must be ID\\tTweet\\tLabel");
  std::vector<LabeledExample> out;
  while (std::getline(in, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (is_blank(line)) continue;
    if (!is_valid_utf8(line)) throw DecodeError(path + ":" + std::to_string(line_number) + ": invalid UTF-8");
    const auto first = line.find('\t');
    const auto last = line.rfind('\t');
    if (first == std::string::npos || first == last) {
      throw DataError(path + ":" + std::to_string(line_number) + ": expected 3 tab-separated fields");
    }
    LabeledExample ex;
    ex.id = line.substr(0, first);
    ex.text = line.substr(first + 1, last - first - 1);
    try {
      ex.label = parse_label(line.substr(last + 1));
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(line_number) + ": " + e.what());
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void write_labeled_tsv(const std::string& path, const std::vector<LabeledExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write labeled file: " + path);
  out << "ID\tTweet\tLabel\n";
  for (const auto& ex : examples) out << ex.id << '\t' << ex.text << '\t' << label_name(ex.label) << '\n';
}

}  // namespace komet
