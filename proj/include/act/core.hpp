#pragma once

// Vocabulary, token sequences, constraints and corpus containers.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "act/errors.hpp"

namespace act {

using TokenId = std::int32_t;

/// Token ids of one sentence, unframed unless a function says otherwise.
using Sentence = std::vector<TokenId>;

/// Reserved ids; they occupy the lowest indices in this fixed order.
namespace reserved {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kPlh = 3;
inline constexpr TokenId kUnk = 4;
inline constexpr TokenId kCount = 5;

inline constexpr std::string_view kSymbols[kCount] = {"<pad>", "<s>", "</s>", "[PLH]",
                                                      "<UNK>"};

constexpr bool is_reserved(TokenId id) { return id >= 0 && id < kCount; }
}  // namespace reserved

class Vocabulary {
 public:
  /// Vocabulary holding only the reserved symbols.
  Vocabulary() {
    for (auto s : reserved::kSymbols) push(std::string(s));
  }

  /// Reserved symbols followed by `words` in the given order. Duplicates and
  /// reserved strings in `words` are ignored.
  explicit Vocabulary(std::span<const std::string> words) : Vocabulary() {
    for (const auto& w : words)
      if (!index_.contains(w)) push(w);
  }

  TokenId id(std::string_view symbol) const {
    auto it = index_.find(std::string(symbol));
    return it == index_.end() ? reserved::kUnk : it->second;
  }

  bool contains(std::string_view symbol) const { return index_.contains(std::string(symbol)); }

  const std::string& symbol(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size())
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(symbols_.size()));
    return symbols_[static_cast<std::size_t>(id)];
  }

  bool valid(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < symbols_.size();
  }

  std::size_t size() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }

  bool operator==(const Vocabulary& other) const { return symbols_ == other.symbols_; }

 private:
  void push(std::string s) {
    index_.emplace(s, static_cast<TokenId>(symbols_.size()));
    symbols_.push_back(std::move(s));
  }

  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Ordered target-side term spans; every span is nonempty.
struct ConstraintSet {
  std::vector<Sentence> constraints;

  std::size_t size() const { return constraints.size(); }
  bool empty() const { return constraints.empty(); }
  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& c : constraints) n += c.size();
    return n;
  }
  /// C_1 ∥ C_2 ∥ … ∥ C_k
  Sentence concatenated() const {
    Sentence out;
    for (const auto& c : constraints) out.insert(out.end(), c.begin(), c.end());
    return out;
  }
  bool operator==(const ConstraintSet&) const = default;
};

struct SentencePair {
  Sentence source;
  Sentence target;
  bool operator==(const SentencePair&) const = default;
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  /// Either empty or one entry per pair.
  std::vector<ConstraintSet> constraints;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
  bool has_constraints() const { return !constraints.empty(); }
  bool operator==(const ParallelCorpus&) const = default;
};

// ---------------------------------------------------------------------------
// Text <-> ids

inline std::vector<std::string> split_whitespace(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline Sentence tokenize(std::string_view line, const Vocabulary& vocab) {
  Sentence out;
  for (const auto& w : split_whitespace(line)) out.push_back(vocab.id(w));
  return out;
}

inline std::string detokenize(std::span<const TokenId> tokens, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.symbol(tokens[i]);
  }
  return out;
}

/// Tokens with frequency >= min_count, most frequent first, ties broken
/// lexicographically, after the reserved symbols.
inline Vocabulary build_vocabulary(std::span<const std::string> lines, int min_count = 1) {
  if (min_count < 1) throw UsageError("min_count must be >= 1");
  std::map<std::string, long> counts;
  for (const auto& line : lines)
    for (auto& w : split_whitespace(line)) ++counts[w];
  std::vector<std::pair<std::string, long>> ranked;
  for (auto& [w, c] : counts) {
    if (c < min_count) continue;
    bool is_reserved = false;
    for (auto s : reserved::kSymbols) is_reserved |= (w == s);
    if (!is_reserved) ranked.emplace_back(w, c);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(ranked.size());
  for (auto& [w, c] : ranked) words.push_back(w);
  return Vocabulary(words);
}

// ---------------------------------------------------------------------------
// Files

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline void write_lines(const std::string& path, std::span<const std::string> lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw DataError("write failed: " + path);
}

inline void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  write_lines(path, vocab.symbols());
}

inline Vocabulary load_vocabulary(const std::string& path) {
  auto lines = read_lines(path);
  if (lines.size() < static_cast<std::size_t>(reserved::kCount))
    throw DataError(path + ": vocabulary shorter than the reserved block");
  for (TokenId i = 0; i < reserved::kCount; ++i)
    if (lines[static_cast<std::size_t>(i)] != reserved::kSymbols[i])
      throw DataError(path + ": line " + std::to_string(i + 1) + " must be '" +
                      std::string(reserved::kSymbols[i]) + "'");
  std::vector<std::string> words(lines.begin() + reserved::kCount, lines.end());
  Vocabulary vocab(words);
  if (vocab.size() != lines.size()) throw DataError(path + ": duplicate symbols");
  return vocab;
}

/// Two line-aligned corpus files tokenized against one shared vocabulary.
inline ParallelCorpus load_parallel_corpus(const std::string& source_path,
                                           const std::string& target_path,
                                           const Vocabulary& vocab) {
  auto src = read_lines(source_path);
  auto tgt = read_lines(target_path);
  if (src.size() != tgt.size())
    throw DataError("line count mismatch: " + source_path + " has " + std::to_string(src.size()) +
                    ", " + target_path + " has " + std::to_string(tgt.size()));
  ParallelCorpus corpus;
  corpus.pairs.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i)
    corpus.pairs.push_back({tokenize(src[i], vocab), tokenize(tgt[i], vocab)});
  return corpus;
}

/// True iff `needle` occurs contiguously in `haystack` starting at or after `from`;
/// returns the start index or npos.
inline std::size_t find_span(std::span<const TokenId> haystack, std::span<const TokenId> needle,
                             std::size_t from = 0) {
  if (needle.empty() || needle.size() > haystack.size()) return std::string::npos;
  for (std::size_t i = from; i + needle.size() <= haystack.size(); ++i)
    if (std::equal(needle.begin(), needle.end(), haystack.begin() + static_cast<long>(i)))
      return i;
  return std::string::npos;
}

}  // namespace act
