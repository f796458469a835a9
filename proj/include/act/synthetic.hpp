#pragma once

// Generated corpora for end-to-end checks: a word-for-word lexicon
// translation task with local reordering, and a copy task.

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "act/core.hpp"
#include "act/random.hpp"

namespace act {

struct LexiconTaskConfig {
  int words = 50;            // per side
  int modifiers = 10;        // source words that swap with their right neighbor
  int min_len = 4;
  int max_len = 8;
  double zipf_exponent = 2.2;
  int train_pairs = 2000;
  int test_pairs = 200;
  /// Held-out pairs whose rarest target word occurs 1..rare_max_count times
  /// in the training targets.
  int rare_test_pairs = 200;
  int rare_max_count = 5;
  std::uint64_t seed = 7;
};

struct LexiconTask {
  Vocabulary vocab;
  std::vector<int> mapping;  // source word index -> target word index
  std::vector<bool> modifier;
  ParallelCorpus train;
  ParallelCorpus test;
  ParallelCorpus rare_test;
};

inline std::string indexed_word(char prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%c%02d", prefix, i);
  return buf;
}

/// Word-for-word translation of a source sentence (given as word indices) with
/// modifier/next swaps applied left to right, non-overlapping.
inline std::vector<int> lexicon_translate(std::span<const int> src, std::span<const int> mapping,
                                          const std::vector<bool>& modifier) {
  std::vector<int> out;
  out.reserve(src.size());
  for (int w : src) out.push_back(mapping[static_cast<std::size_t>(w)]);
  for (std::size_t i = 0; i + 1 < src.size(); ++i)
    if (modifier[static_cast<std::size_t>(src[i])]) {
      std::swap(out[i], out[i + 1]);
      ++i;
    }
  return out;
}

/// Occurrences of every id in the training targets.
inline std::vector<long> target_counts(const ParallelCorpus& train, std::size_t vocab_size) {
  std::vector<long> freq(vocab_size, 0);
  for (const auto& p : train.pairs)
    for (TokenId t : p.target) ++freq[static_cast<std::size_t>(t)];
  return freq;
}

inline LexiconTask make_lexicon_task(const LexiconTaskConfig& c) {
  LexiconTask task;
  std::vector<std::string> words;
  for (int i = 0; i < c.words; ++i) words.push_back(indexed_word('s', i));
  for (int i = 0; i < c.words; ++i) words.push_back(indexed_word('t', i));
  task.vocab = Vocabulary(words);

  Rng rng(stream_seed(c.seed, "lexicon"));
  task.mapping.resize(static_cast<std::size_t>(c.words));
  for (int i = 0; i < c.words; ++i) task.mapping[static_cast<std::size_t>(i)] = i;
  rng.shuffle(task.mapping);
  // Modifiers are picked among the frequent words so that swaps are common.
  task.modifier.assign(static_cast<std::size_t>(c.words), false);
  for (std::size_t i : rng.choose(static_cast<std::size_t>(std::min(c.words, 2 * c.modifiers)),
                                  static_cast<std::size_t>(c.modifiers)))
    task.modifier[i] = true;

  std::vector<double> weights;
  for (int i = 0; i < c.words; ++i) weights.push_back(std::pow(i + 1.0, -c.zipf_exponent));

  auto make_pair = [&](Rng& r) {
    auto len = static_cast<std::size_t>(c.min_len + static_cast<int>(r.below(
                                                        static_cast<std::uint64_t>(c.max_len - c.min_len + 1))));
    std::vector<int> src;
    for (std::size_t i = 0; i < len; ++i) src.push_back(static_cast<int>(r.weighted(weights)));
    std::vector<int> tgt = lexicon_translate(src, task.mapping, task.modifier);
    SentencePair p;
    for (int w : src) p.source.push_back(task.vocab.id(indexed_word('s', w)));
    for (int w : tgt) p.target.push_back(task.vocab.id(indexed_word('t', w)));
    return p;
  };
  Rng train_rng(stream_seed(c.seed, "lexicon.train"));
  for (int i = 0; i < c.train_pairs; ++i) task.train.pairs.push_back(make_pair(train_rng));
  Rng test_rng(stream_seed(c.seed, "lexicon.test"));
  for (int i = 0; i < c.test_pairs; ++i) task.test.pairs.push_back(make_pair(test_rng));

  auto counts = target_counts(task.train, task.vocab.size());
  Rng rare_rng(stream_seed(c.seed, "lexicon.rare"));
  const long budget = 1000L * std::max(c.rare_test_pairs, 1);
  for (long tries = 0; static_cast<int>(task.rare_test.size()) < c.rare_test_pairs; ++tries) {
    if (tries == budget)
      throw DataError("synthetic corpus: found only " + std::to_string(task.rare_test.size()) +
                      " pairs with a target word seen 1.." + std::to_string(c.rare_max_count) + " times");
    SentencePair p = make_pair(rare_rng);
    long rarest = std::numeric_limits<long>::max();
    for (TokenId t : p.target) rarest = std::min(rarest, counts[static_cast<std::size_t>(t)]);
    if (rarest >= 1 && rarest <= c.rare_max_count) task.rare_test.pairs.push_back(std::move(p));
  }
  return task;
}

/// One single-word constraint per test pair: the reference word that is
/// rarest in the training targets (leftmost on ties).
inline std::vector<ConstraintSet> rare_word_constraints(const ParallelCorpus& test,
                                                        const ParallelCorpus& train,
                                                        std::size_t vocab_size) {
  auto freq = target_counts(train, vocab_size);
  std::vector<ConstraintSet> out;
  for (const auto& p : test.pairs) {
    ConstraintSet cs;
    if (!p.target.empty()) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < p.target.size(); ++i)
        if (freq[static_cast<std::size_t>(p.target[i])] < freq[static_cast<std::size_t>(p.target[best])])
          best = i;
      cs.constraints.push_back({p.target[best]});
    }
    out.push_back(std::move(cs));
  }
  return out;
}

struct CopyTask {
  Vocabulary vocab;
  ParallelCorpus train;
};

/// target == source over `words` symbols, uniform lengths in [min_len, max_len].
inline CopyTask make_copy_task(int words, int pairs, int min_len, int max_len, std::uint64_t seed) {
  CopyTask task;
  std::vector<std::string> symbols;
  for (int i = 0; i < words; ++i) symbols.push_back(indexed_word('w', i));
  task.vocab = Vocabulary(symbols);
  Rng rng(stream_seed(seed, "copy"));
  for (int i = 0; i < pairs; ++i) {
    auto len = static_cast<std::size_t>(min_len + static_cast<int>(rng.below(
                                                      static_cast<std::uint64_t>(max_len - min_len + 1))));
    SentencePair p;
    for (std::size_t k = 0; k < len; ++k)
      p.source.push_back(static_cast<TokenId>(reserved::kCount + static_cast<int>(rng.below(
                                                                     static_cast<std::uint64_t>(words)))));
    p.target = p.source;
    task.train.pairs.push_back(std::move(p));
  }
  return task;
}

/// Position-wise token matches over max(len(hyp), len(ref)), pooled.
inline double token_accuracy(std::span<const Sentence> hyps, std::span<const Sentence> refs) {
  long hit = 0, total = 0;
  for (std::size_t i = 0; i < hyps.size() && i < refs.size(); ++i) {
    const auto& h = hyps[i];
    const auto& r = refs[i];
    for (std::size_t k = 0; k < std::min(h.size(), r.size()); ++k) hit += h[k] == r[k];
    total += static_cast<long>(std::max(h.size(), r.size()));
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 1.0;
}

}  // namespace act
