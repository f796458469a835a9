#pragma once

// Corpus BLEU-4, term usage rate, word frequency tables, and the
// self-constraint / tertile / n-constraint analysis helpers.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "act/core.hpp"
#include "act/errors.hpp"
#include "act/random.hpp"

namespace act {

// ---------------------------------------------------------------- BLEU

struct BleuStats {
  std::array<long, 4> matches{};  // clipped n-gram matches
  std::array<long, 4> totals{};   // hypothesis n-grams
  long hyp_len = 0;
  long ref_len = 0;

  BleuStats& operator+=(const BleuStats& o) {
    for (int n = 0; n < 4; ++n) matches[n] += o.matches[n], totals[n] += o.totals[n];
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
  }
};

inline BleuStats bleu_stats(std::span<const TokenId> hyp, std::span<const TokenId> ref) {
  BleuStats s;
  s.hyp_len = static_cast<long>(hyp.size());
  s.ref_len = static_cast<long>(ref.size());
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<TokenId>, long> ref_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i)
      ++ref_counts[std::vector<TokenId>(ref.begin() + i, ref.begin() + i + n)];
    std::map<std::vector<TokenId>, long> hyp_counts;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i)
      ++hyp_counts[std::vector<TokenId>(hyp.begin() + i, hyp.begin() + i + n)];
    for (const auto& [gram, c] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) s.matches[n - 1] += std::min(c, it->second);
      s.totals[n - 1] += c;
    }
  }
  return s;
}

inline double bleu_from_stats(const BleuStats& s) {
  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    if (s.matches[n] == 0 || s.totals[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]));
  }
  double bp = s.hyp_len < s.ref_len
                  ? std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len))
                  : 1.0;
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

/// Case-sensitive token-level BLEU-4, single reference, no smoothing.
inline double corpus_bleu(std::span<const Sentence> hypotheses, std::span<const Sentence> references) {
  if (hypotheses.empty()) throw DataError("corpus_bleu: no hypotheses");
  if (hypotheses.size() != references.size())
    throw DataError("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                    std::to_string(references.size()) + " references");
  BleuStats total;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) total += bleu_stats(hypotheses[i], references[i]);
  return bleu_from_stats(total);
}

// ---------------------------------------------------------------- Term%

struct TermUsage {
  long used = 0;
  long total = 0;
  double rate() const {
    if (total == 0) throw DataError("term usage rate undefined: zero constraints");
    return 100.0 * static_cast<double>(used) / static_cast<double>(total);
  }
};

inline TermUsage term_usage(std::span<const Sentence> hypotheses,
                            std::span<const ConstraintSet> constraints) {
  if (hypotheses.size() != constraints.size())
    throw DataError("term usage: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                    std::to_string(constraints.size()) + " constraint sets");
  TermUsage u;
  for (std::size_t i = 0; i < hypotheses.size(); ++i)
    for (const auto& c : constraints[i].constraints) {
      ++u.total;
      u.used += find_span(hypotheses[i], c) != std::string::npos;
    }
  return u;
}

inline double term_usage_rate(std::span<const Sentence> hypotheses,
                              std::span<const ConstraintSet> constraints) {
  return term_usage(hypotheses, constraints).rate();
}

// ---------------------------------------------------------------- frequencies

inline std::string lowercase(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

class FrequencyTable {
 public:
  void add(std::string_view word, long n = 1) { counts_[lowercase(std::string(word))] += n; }
  long count(std::string_view word) const {
    auto it = counts_.find(lowercase(std::string(word)));
    return it == counts_.end() ? 0 : it->second;
  }
  std::size_t size() const { return counts_.size(); }
  const std::map<std::string, long>& counts() const { return counts_; }

 private:
  std::map<std::string, long> counts_;
};

/// Lowercased word counts over target-side lines.
inline FrequencyTable word_frequencies(std::span<const std::string> target_lines) {
  FrequencyTable t;
  for (const auto& line : target_lines)
    for (const auto& w : split_whitespace(line)) t.add(w);
  return t;
}

inline FrequencyTable word_frequencies(const ParallelCorpus& corpus, const Vocabulary& vocab) {
  FrequencyTable t;
  for (const auto& p : corpus.pairs)
    for (TokenId id : p.target) t.add(vocab.symbol(id));
  return t;
}

// ---------------------------------------------------------------- self-constraints

enum class SelfConstraintOrder { kFrequency, kTfidf };

inline SelfConstraintOrder parse_self_constraint_order(std::string_view s) {
  if (s == "frequency" || s == "freq") return SelfConstraintOrder::kFrequency;
  if (s == "tfidf") return SelfConstraintOrder::kTfidf;
  throw UsageError("unknown self-constraint order '" + std::string(s) + "' (frequency, tfidf)");
}

inline constexpr int kBuckets = 6;

struct SelfConstraint {
  int bucket = 0;         // 0-based; bucket 0 = most frequent / lowest TF-IDF
  std::size_t position = 0;  // index into the reference
  TokenId token = 0;
  std::vector<std::size_t> members;  // reference positions in this bucket
};

/// Contiguous bucket bounds [begin, end) for n items split into 6 with the
/// earlier buckets taking the remainder.
inline std::array<std::pair<std::size_t, std::size_t>, kBuckets> bucket_bounds(std::size_t n) {
  std::array<std::pair<std::size_t, std::size_t>, kBuckets> b{};
  std::size_t base = n / kBuckets, extra = n % kBuckets, at = 0;
  for (std::size_t i = 0; i < kBuckets; ++i) {
    std::size_t len = base + (i < extra ? 1 : 0);
    b[i] = {at, at + len};
    at += len;
  }
  return b;
}

/// Six single-word constraints, one per bucket, or nullopt if the reference
/// is rejected. `keys` gives one sort key per reference position: frequency
/// (sorted descending) or TF-IDF (sorted ascending). Ties keep position order.
inline std::optional<std::array<SelfConstraint, kBuckets>> build_self_constraints(
    std::span<const TokenId> reference, std::span<const double> keys, SelfConstraintOrder order,
    bool exclude_unk, Rng& rng) {
  if (keys.size() != reference.size()) throw DataError("self-constraints: key count mismatch");
  const std::size_t n = reference.size();
  if (n < kBuckets) return std::nullopt;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return order == SelfConstraintOrder::kFrequency ? keys[a] > keys[b] : keys[a] < keys[b];
  });
  std::array<SelfConstraint, kBuckets> out;
  auto bounds = bucket_bounds(n);
  for (int k = 0; k < kBuckets; ++k) {
    auto [lo, hi] = bounds[static_cast<std::size_t>(k)];
    SelfConstraint& sc = out[static_cast<std::size_t>(k)];
    sc.bucket = k;
    sc.members.assign(idx.begin() + static_cast<long>(lo), idx.begin() + static_cast<long>(hi));
    std::vector<std::size_t> eligible;
    for (std::size_t pos : sc.members)
      if (!(exclude_unk && reference[pos] == reserved::kUnk)) eligible.push_back(pos);
    if (eligible.empty()) return std::nullopt;
    sc.position = eligible[rng.below(eligible.size())];
    sc.token = reference[sc.position];
  }
  return out;
}

/// Frequency keys for each reference token, looked up lowercased.
inline std::vector<double> frequency_keys(std::span<const TokenId> reference, const Vocabulary& vocab,
                                          const FrequencyTable& freq) {
  std::vector<double> k;
  k.reserve(reference.size());
  for (TokenId t : reference) k.push_back(static_cast<double>(freq.count(vocab.symbol(t))));
  return k;
}

// ---------------------------------------------------------------- tertiles

struct Tertiles {
  std::array<std::vector<std::size_t>, 3> groups;  // high, medium, low (sample indices)
  std::vector<double> keys;                        // per input sample
};

inline double mean_constraint_frequency(const ConstraintSet& cs, const Vocabulary& vocab,
                                        const FrequencyTable& freq) {
  double sum = 0.0;
  long n = 0;
  for (const auto& c : cs.constraints)
    for (TokenId t : c) sum += static_cast<double>(freq.count(vocab.symbol(t))), ++n;
  if (n == 0) throw DataError("tertile split: sample without constraints");
  return sum / static_cast<double>(n);
}

/// Sorts samples by key descending (stable) and cuts them into three groups
/// whose sizes differ by at most one, larger groups first.
inline Tertiles tertile_split(std::vector<double> keys) {
  Tertiles t;
  t.keys = std::move(keys);
  std::vector<std::size_t> idx(t.keys.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return t.keys[a] > t.keys[b]; });
  std::size_t n = idx.size(), base = n / 3, extra = n % 3, at = 0;
  for (std::size_t g = 0; g < 3; ++g) {
    std::size_t len = base + (g < extra ? 1 : 0);
    t.groups[g].assign(idx.begin() + static_cast<long>(at), idx.begin() + static_cast<long>(at + len));
    at += len;
  }
  return t;
}

inline Tertiles tertile_split(std::span<const ConstraintSet> samples, const Vocabulary& vocab,
                              const FrequencyTable& freq) {
  std::vector<double> keys;
  keys.reserve(samples.size());
  for (const auto& cs : samples) keys.push_back(mean_constraint_frequency(cs, vocab, freq));
  return tertile_split(std::move(keys));
}

inline constexpr std::array<const char*, 3> kTertileNames{"high", "medium", "low"};

// ---------------------------------------------------------------- n-constraints

/// n distinct reference positions, uniform without replacement, as single-word
/// constraints in target order.
inline ConstraintSet sample_n_constraints(std::span<const TokenId> reference, std::size_t n, Rng& rng) {
  if (reference.size() < n)
    throw DataError("sample_n_constraints: reference length " + std::to_string(reference.size()) +
                    " < n=" + std::to_string(n));
  auto picks = rng.choose(reference.size(), n);
  std::sort(picks.begin(), picks.end());
  ConstraintSet cs;
  for (std::size_t p : picks) cs.constraints.push_back({reference[p]});
  return cs;
}

// ---------------------------------------------------------------- reports

struct ReportRow {
  std::string group;
  long samples = 0;
  double bleu = 0.0;
  std::optional<double> term_usage;  // absent when the group has no constraints
};

struct EvalReport {
  std::string title;
  std::vector<ReportRow> rows;  // first row is the overall figure

  static constexpr const char* kBleuNote =
      "corpus BLEU-4, token-level, case-sensitive, single reference, no smoothing";
};

inline ReportRow evaluate_group(std::string name, std::span<const Sentence> hyps,
                                std::span<const Sentence> refs,
                                std::span<const ConstraintSet> constraints) {
  ReportRow r;
  r.group = std::move(name);
  r.samples = static_cast<long>(hyps.size());
  r.bleu = hyps.empty() ? 0.0 : corpus_bleu(hyps, refs);
  if (!constraints.empty()) {
    TermUsage u = term_usage(hyps, constraints);
    if (u.total > 0) r.term_usage = u.rate();
  }
  return r;
}

inline std::string format_fixed(double v, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["title"] = r.title;
  j["bleu"] = EvalReport::kBleuNote;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    nlohmann::ordered_json o;
    o["group"] = row.group;
    o["n_samples"] = row.samples;
    o["bleu"] = std::round(row.bleu * 1e4) / 1e4;
    if (row.term_usage)
      o["term_usage"] = std::round(*row.term_usage * 1e4) / 1e4;
    else
      o["term_usage"] = nullptr;
    rows.push_back(o);
  }
  j["rows"] = rows;
  return j;
}

inline std::string to_text(const EvalReport& r) {
  std::ostringstream os;
  os << "# " << r.title << "\n# " << EvalReport::kBleuNote << "\n";
  os << std::left << std::setw(16) << "group" << std::right << std::setw(10) << "samples"
     << std::setw(10) << "BLEU" << std::setw(10) << "Term%" << "\n";
  for (const auto& row : r.rows)
    os << std::left << std::setw(16) << row.group << std::right << std::setw(10) << row.samples
       << std::setw(10) << format_fixed(row.bleu) << std::setw(10)
       << (row.term_usage ? format_fixed(*row.term_usage) : std::string("-")) << "\n";
  return os.str();
}

inline std::string to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "bucket_id,n_samples,bleu,term_usage\n";
  for (const auto& row : r.rows)
    os << row.group << ',' << row.samples << ',' << format_fixed(row.bleu, 4) << ','
       << (row.term_usage ? format_fixed(*row.term_usage, 4) : std::string()) << "\n";
  return os.str();
}

}  // namespace act
