#pragma once

// Constrained-training data generation: TF-IDF pseudo-term sampling, IBM-1
// word alignment, alignment labels and assembly of imitation-learning
// examples whose pseudo-term tokens can never be deleted.

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "act/core.hpp"
#include "act/oracle.hpp"
#include "act/random.hpp"
#include "json.hpp"

namespace act {

// ---------------------------------------------------------------------------
// TF-IDF

struct ScoreTable {
  std::vector<std::vector<double>> scores;  // per target sentence, per position
  std::vector<long> document_frequency;     // indexed by token id
  long documents = 0;

  double idf(TokenId t) const {
    long df = (t >= 0 && static_cast<std::size_t>(t) < document_frequency.size())
                  ? document_frequency[static_cast<std::size_t>(t)]
                  : 0;
    return std::log((1.0 + static_cast<double>(documents)) / (1.0 + static_cast<double>(df))) + 1.0;
  }

  /// Scores of an arbitrary sentence under this table's document frequencies.
  std::vector<double> score(std::span<const TokenId> target) const {
    std::vector<double> out(target.size(), 0.0);
    if (target.empty()) return out;
    std::map<TokenId, long> tf;
    for (TokenId t : target) ++tf[t];
    for (std::size_t i = 0; i < target.size(); ++i) {
      TokenId t = target[i];
      if (reserved::is_reserved(t)) continue;
      out[i] = static_cast<double>(tf[t]) / static_cast<double>(target.size()) * idf(t);
    }
    return out;
  }
};

/// tf = count/len, idf = ln((1+N)/(1+df)) + 1 over target sentences;
/// reserved and UNK tokens score 0.
inline ScoreTable tfidf_scores(const ParallelCorpus& corpus) {
  if (corpus.empty()) throw DataError("tfidf_scores: empty corpus");
  ScoreTable table;
  table.documents = static_cast<long>(corpus.size());
  TokenId max_id = 0;
  for (const auto& p : corpus.pairs)
    for (TokenId t : p.target) max_id = std::max(max_id, t);
  table.document_frequency.assign(static_cast<std::size_t>(max_id) + 1, 0);
  for (const auto& p : corpus.pairs) {
    std::vector<TokenId> seen(p.target.begin(), p.target.end());
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    for (TokenId t : seen) ++table.document_frequency[static_cast<std::size_t>(t)];
  }
  table.scores.reserve(corpus.size());
  for (const auto& p : corpus.pairs) table.scores.push_back(table.score(p.target));
  return table;
}

// ---------------------------------------------------------------------------
// Pseudo terms

struct SampledTerms {
  ConstraintSet constraints;           // single-word constraints in target order
  std::vector<std::size_t> positions;  // their target positions, increasing
};

/// Draws m ~ U{0..3} (capped at the number of positive scores) target
/// positions without replacement, proportionally to score. `forced_count`
/// replaces the draw of m (still capped).
inline SampledTerms sample_pseudo_terms(std::span<const TokenId> target,
                                        std::span<const double> scores, Rng& rng,
                                        std::optional<std::size_t> forced_count = std::nullopt,
                                        std::size_t max_terms = 3) {
  if (scores.size() != target.size())
    throw UsageError("sample_pseudo_terms: scores length != target length");
  std::size_t m = forced_count ? *forced_count : static_cast<std::size_t>(rng.below(max_terms + 1));
  std::size_t positive = 0;
  for (double s : scores) positive += s > 0.0;
  m = std::min(m, positive);
  std::vector<double> weights(scores.begin(), scores.end());
  for (double& w : weights) w = std::max(w, 0.0);
  SampledTerms out;
  for (std::size_t k = 0; k < m; ++k) {
    std::size_t pos = rng.weighted(weights);
    weights[pos] = 0.0;
    out.positions.push_back(pos);
  }
  std::sort(out.positions.begin(), out.positions.end());
  for (std::size_t pos : out.positions) out.constraints.constraints.push_back({target[pos]});
  return out;
}

// ---------------------------------------------------------------------------
// IBM Model 1

/// Translation table t(target | source).
class AlignmentModel {
 public:
  double prob(TokenId target, TokenId source) const {
    auto it = table_.find(source);
    if (it == table_.end()) return 0.0;
    auto jt = it->second.find(target);
    return jt == it->second.end() ? 0.0 : jt->second;
  }

  /// Most probable target word for `source`, or UNK if unseen.
  TokenId best_target(TokenId source) const {
    auto it = table_.find(source);
    if (it == table_.end()) return reserved::kUnk;
    TokenId best = reserved::kUnk;
    double best_p = -1.0;
    for (auto& [t, p] : it->second)
      if (p > best_p) best = t, best_p = p;
    return best;
  }

  const std::map<TokenId, std::map<TokenId, double>>& table() const { return table_; }
  std::map<TokenId, std::map<TokenId, double>>& table() { return table_; }

  /// Σ_pairs Σ_j ln( (1/|src|) Σ_i t(tgt_j | src_i) ).
  double log_likelihood(const ParallelCorpus& corpus) const {
    double ll = 0.0;
    for (const auto& p : corpus.pairs) {
      if (p.source.empty()) continue;
      for (TokenId f : p.target) {
        double s = 0.0;
        for (TokenId e : p.source) s += prob(f, e);
        ll += std::log(s / static_cast<double>(p.source.size()));
      }
    }
    return ll;
  }

 private:
  std::map<TokenId, std::map<TokenId, double>> table_;
};

namespace detail {
inline void normalize_rows(std::map<TokenId, std::map<TokenId, double>>& table) {
  for (auto& [e, row] : table) {
    double total = 0.0;
    for (auto& [f, c] : row) total += c;
    for (auto& [f, c] : row) c /= total;
  }
}
}  // namespace detail

/// EM training of IBM Model 1 from a uniform start over co-occurring words.
inline AlignmentModel train_aligner(const ParallelCorpus& corpus, int em_iterations,
                                    std::vector<double>* log_likelihood_trace = nullptr) {
  if (em_iterations < 1) throw UsageError("em_iterations must be >= 1");
  if (corpus.empty()) throw DataError("train_aligner: empty corpus");
  AlignmentModel model;
  auto& t = model.table();
  for (const auto& p : corpus.pairs)
    for (TokenId e : p.source)
      for (TokenId f : p.target) t[e][f] = 1.0;
  if (t.empty()) throw DataError("train_aligner: corpus has no co-occurring words");
  detail::normalize_rows(t);
  if (log_likelihood_trace) log_likelihood_trace->push_back(model.log_likelihood(corpus));

  for (int it = 0; it < em_iterations; ++it) {
    std::map<TokenId, std::map<TokenId, double>> counts;
    for (const auto& p : corpus.pairs) {
      for (TokenId f : p.target) {
        double denom = 0.0;
        for (TokenId e : p.source) denom += model.prob(f, e);
        if (denom <= 0.0) continue;
        for (TokenId e : p.source) counts[e][f] += model.prob(f, e) / denom;
      }
    }
    detail::normalize_rows(counts);
    t = std::move(counts);
    if (log_likelihood_trace) log_likelihood_trace->push_back(model.log_likelihood(corpus));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Constraint alignment

struct AlignedConstraint {
  std::size_t target_begin = 0;  // [target_begin, target_end) in the target
  std::size_t target_end = 0;
  std::vector<std::size_t> source_span;  // sorted, unique
  bool operator==(const AlignedConstraint&) const = default;
};

struct TargetSpan {
  std::size_t begin = 0, end = 0;
};

/// Locates each constraint in the target, scanning left to right; a span not
/// found after the previous one is searched from the start.
inline std::vector<TargetSpan> locate_constraints(std::span<const TokenId> target,
                                                  const ConstraintSet& constraints) {
  std::vector<TargetSpan> spans;
  std::size_t from = 0;
  for (std::size_t i = 0; i < constraints.size(); ++i) {
    const auto& c = constraints.constraints[i];
    std::size_t at = find_span(target, c, from);
    if (at == std::string::npos) at = find_span(target, c, 0);
    if (at == std::string::npos)
      throw DataError("constraint " + std::to_string(i + 1) + " does not occur in the target");
    spans.push_back({at, at + c.size()});
    from = at + c.size();
  }
  return spans;
}

inline constexpr double kDefaultAlignThreshold = 0.1;

/// Each constraint token is linked to argmax_j t(token | source_j), when that
/// probability reaches `threshold`.
inline std::vector<AlignedConstraint> align_constraints(std::span<const TokenId> source,
                                                        std::span<const TargetSpan> spans,
                                                        std::span<const TokenId> target,
                                                        const AlignmentModel& model,
                                                        double threshold = kDefaultAlignThreshold) {
  std::vector<AlignedConstraint> out;
  for (const auto& sp : spans) {
    if (sp.begin >= sp.end || sp.end > target.size())
      throw DataError("align_constraints: target span out of bounds");
    AlignedConstraint ac{sp.begin, sp.end, {}};
    for (std::size_t k = sp.begin; k < sp.end; ++k) {
      double best = 0.0;
      std::optional<std::size_t> best_j;
      for (std::size_t j = 0; j < source.size(); ++j) {
        double p = model.prob(target[k], source[j]);
        if (p > best) best = p, best_j = j;
      }
      if (best_j && best >= threshold) ac.source_span.push_back(*best_j);
    }
    std::sort(ac.source_span.begin(), ac.source_span.end());
    ac.source_span.erase(std::unique(ac.source_span.begin(), ac.source_span.end()),
                         ac.source_span.end());
    out.push_back(std::move(ac));
  }
  return out;
}

inline std::vector<AlignedConstraint> align_constraints(std::span<const TokenId> source,
                                                        std::span<const TokenId> target,
                                                        const ConstraintSet& constraints,
                                                        const AlignmentModel& model,
                                                        double threshold = kDefaultAlignThreshold) {
  auto spans = locate_constraints(target, constraints);
  return align_constraints(source, spans, target, model, threshold);
}

/// Source-target links of one sentence pair.
using PharaohAlignment = std::vector<std::pair<std::size_t, std::size_t>>;

/// Parses "0-1 2-3 ..." (source-target). Also accepts "0-1-p" style
/// probability suffixes by ignoring what follows the second index.
inline PharaohAlignment parse_pharaoh(std::string_view line) {
  PharaohAlignment links;
  for (const auto& tok : split_whitespace(line)) {
    auto dash = tok.find('-');
    if (dash == std::string::npos || dash == 0)
      throw DataError("malformed alignment entry '" + tok + "'");
    try {
      std::size_t used = 0;
      std::size_t s = std::stoul(tok.substr(0, dash), &used);
      if (used != dash) throw std::invalid_argument(tok);
      std::size_t t = std::stoul(tok.substr(dash + 1));
      links.emplace_back(s, t);
    } catch (const std::logic_error&) {
      throw DataError("malformed alignment entry '" + tok + "'");
    }
  }
  return links;
}

inline std::string format_pharaoh(const PharaohAlignment& links) {
  std::string out;
  for (std::size_t i = 0; i < links.size(); ++i) {
    if (i) out.push_back(' ');
    out += std::to_string(links[i].first) + "-" + std::to_string(links[i].second);
  }
  return out;
}

/// Source spans from precomputed links instead of the internal aligner.
inline std::vector<AlignedConstraint> align_constraints(std::span<const TargetSpan> spans,
                                                        const PharaohAlignment& links,
                                                        std::size_t source_len) {
  std::vector<AlignedConstraint> out;
  for (const auto& sp : spans) {
    AlignedConstraint ac{sp.begin, sp.end, {}};
    for (auto [s, t] : links)
      if (t >= sp.begin && t < sp.end && s < source_len) ac.source_span.push_back(s);
    std::sort(ac.source_span.begin(), ac.source_span.end());
    ac.source_span.erase(std::unique(ac.source_span.begin(), ac.source_span.end()),
                         ac.source_span.end());
    out.push_back(std::move(ac));
  }
  return out;
}

/// Word alignment of a whole pair under the model (target-to-argmax-source).
inline PharaohAlignment viterbi_alignment(std::span<const TokenId> source,
                                          std::span<const TokenId> target,
                                          const AlignmentModel& model,
                                          double threshold = kDefaultAlignThreshold) {
  PharaohAlignment links;
  for (std::size_t k = 0; k < target.size(); ++k) {
    double best = 0.0;
    std::optional<std::size_t> best_j;
    for (std::size_t j = 0; j < source.size(); ++j) {
      double p = model.prob(target[k], source[j]);
      if (p > best) best = p, best_j = j;
    }
    if (best_j && best >= threshold) links.emplace_back(*best_j, k);
  }
  std::sort(links.begin(), links.end());
  return links;
}

/// 0 = unaligned; i >= 1 marks membership in C'_i (smallest i wins).
using AlignmentLabels = std::vector<int>;

inline AlignmentLabels alignment_labels(std::size_t source_len,
                                        std::span<const AlignedConstraint> aligned) {
  AlignmentLabels labels(source_len, 0);
  for (std::size_t i = aligned.size(); i-- > 0;)
    for (std::size_t p : aligned[i].source_span) {
      if (p >= source_len) throw DataError("alignment_labels: source index out of bounds");
      labels[p] = static_cast<int>(i + 1);
    }
  return labels;
}

/// Labels when no reference exists. Constraint i uses its source term located
/// in the source if given, else the aligner's best source word per token.
inline AlignmentLabels inference_labels(std::span<const TokenId> source, const ConstraintSet& constraints,
                                        std::span<const std::optional<Sentence>> source_terms,
                                        const AlignmentModel* model,
                                        double threshold = kDefaultAlignThreshold) {
  std::vector<AlignedConstraint> aligned;
  for (std::size_t i = 0; i < constraints.size(); ++i) {
    const Sentence& term = constraints.constraints[i];
    AlignedConstraint ac{0, term.size(), {}};
    if (i < source_terms.size() && source_terms[i]) {
      std::size_t at = find_span(source, *source_terms[i]);
      if (at != std::string::npos)
        for (std::size_t k = 0; k < source_terms[i]->size(); ++k) ac.source_span.push_back(at + k);
    } else if (model) {
      TargetSpan whole{0, term.size()};
      ac = align_constraints(source, std::span<const TargetSpan>(&whole, 1), term, *model, threshold)[0];
    } else {
      throw UsageError("inference_labels: constraint without source term and no aligner");
    }
    aligned.push_back(std::move(ac));
  }
  return alignment_labels(source.size(), aligned);
}

// ---------------------------------------------------------------------------
// Training examples

struct PipelineConfig {
  double deletion_prob = 0.5;
  /// Draw each example's deletion rate uniformly from [0, deletion_prob].
  bool sample_deletion_rate = false;
  double noise_rate = 0.15;  // ρ: pseudo-insertions per slot of the deletion candidate
  double align_threshold = kDefaultAlignThreshold;
  int em_iterations = 5;
  int k_max = 8;
  bool pseudo_terms = true;  // false = plain (unconstrained) imitation data
  std::size_t max_pseudo_terms = 3;
  /// Probability that the deletion sub-example is the initial canvas (the
  /// pseudo terms alone, in reference order) instead of the noised reference.
  double initial_canvas_prob = 0.0;
};

struct TrainingExample {
  Sentence source;
  Sentence reference;
  AlignmentLabels alignment_labels;
  ConstraintSet pseudo_terms;
  std::vector<std::size_t> term_positions;  // in the reference

  // Insertion sub-example.
  Sentence fragment;
  std::vector<std::size_t> kept_positions;
  ProtectionMask fragment_protect;
  std::vector<int> placeholder_counts;
  Sentence token_fills;

  // Deletion sub-example.
  Sentence candidate;
  ProtectionMask candidate_protect;
  std::vector<EditLabel> deletion_labels;

  bool operator==(const TrainingExample&) const = default;
};

/// Reference with a random token inserted in each slot with probability ρ;
/// `from_reference[i]` is the reference index of candidate token i or -1.
struct NoisedCandidate {
  Sentence tokens;
  std::vector<long> from_reference;
};

inline NoisedCandidate noise_candidate(std::span<const TokenId> reference, double rate,
                                       std::span<const TokenId> noise_pool, Rng& rng) {
  NoisedCandidate out;
  for (std::size_t slot = 0; slot <= reference.size(); ++slot) {
    bool insert = rng.bernoulli(rate);
    if (insert && !noise_pool.empty()) {
      out.tokens.push_back(noise_pool[rng.below(noise_pool.size())]);
      out.from_reference.push_back(-1);
    }
    if (slot < reference.size()) {
      out.tokens.push_back(reference[slot]);
      out.from_reference.push_back(static_cast<long>(slot));
    }
  }
  return out;
}

/// Source of alignment links for a pair: the internal aligner, or
/// precomputed Pharaoh links.
struct AlignmentSource {
  const AlignmentModel* model = nullptr;
  const PharaohAlignment* links = nullptr;
  double threshold = kDefaultAlignThreshold;
};

inline TrainingExample build_training_example(const SentencePair& pair,
                                              std::span<const double> scores,
                                              const AlignmentSource& aligner, Rng& rng,
                                              const PipelineConfig& config,
                                              std::span<const TokenId> noise_pool) {
  TrainingExample ex;
  ex.source = pair.source;
  ex.reference = pair.target;
  const std::size_t n = pair.target.size();

  if (config.pseudo_terms) {
    auto terms = sample_pseudo_terms(pair.target, scores, rng, std::nullopt,
                                     config.max_pseudo_terms);
    ex.pseudo_terms = std::move(terms.constraints);
    ex.term_positions = std::move(terms.positions);
  }
  ProtectionMask protect(n, false);
  for (std::size_t p : ex.term_positions) protect[p] = true;

  double rate = config.deletion_prob;
  if (config.sample_deletion_rate) rate = rng.uniform() * config.deletion_prob;
  auto record = corrupt_for_insertion(pair.target, protect, rate, rng, config.k_max);
  auto ins = insertion_labels(record, pair.target, config.k_max);
  ex.fragment = std::move(record.fragment);
  ex.kept_positions = std::move(record.kept_positions);
  ex.fragment_protect.resize(ex.kept_positions.size());
  for (std::size_t i = 0; i < ex.kept_positions.size(); ++i)
    ex.fragment_protect[i] = protect[ex.kept_positions[i]];
  ex.placeholder_counts = std::move(ins.placeholder_counts);
  ex.token_fills = std::move(ins.token_fills);

  auto noised = noise_candidate(pair.target, config.noise_rate, noise_pool, rng);
  ex.candidate = std::move(noised.tokens);
  ex.candidate_protect.resize(ex.candidate.size());
  for (std::size_t i = 0; i < ex.candidate.size(); ++i) {
    long r = noised.from_reference[i];
    ex.candidate_protect[i] = r >= 0 && protect[static_cast<std::size_t>(r)];
  }
  if (config.initial_canvas_prob > 0.0 && rng.bernoulli(config.initial_canvas_prob) &&
      !ex.term_positions.empty()) {
    std::vector<std::size_t> pos = ex.term_positions;
    std::sort(pos.begin(), pos.end());
    ex.candidate.clear();
    for (std::size_t p : pos) ex.candidate.push_back(pair.target[p]);
    ex.candidate_protect.assign(ex.candidate.size(), true);
  }
  ex.deletion_labels = deletion_labels(ex.candidate, pair.target, ex.candidate_protect);

  std::vector<TargetSpan> spans;
  for (std::size_t p : ex.term_positions) spans.push_back({p, p + 1});
  std::vector<AlignedConstraint> aligned;
  if (aligner.links)
    aligned = align_constraints(spans, *aligner.links, pair.source.size());
  else if (aligner.model)
    aligned = align_constraints(pair.source, spans, pair.target, *aligner.model,
                                aligner.threshold);
  ex.alignment_labels = alignment_labels(pair.source.size(), aligned);
  if (aligned.empty()) ex.alignment_labels.assign(pair.source.size(), 0);
  return ex;
}

/// Distinct non-reserved target-side tokens, ascending.
inline std::vector<TokenId> target_noise_pool(const ParallelCorpus& corpus) {
  std::vector<TokenId> pool;
  for (const auto& p : corpus.pairs)
    for (TokenId t : p.target)
      if (!reserved::is_reserved(t)) pool.push_back(t);
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  return pool;
}

/// Corpus-level state needed to generate examples for any (pair, epoch).
class DataGenerator {
 public:
  DataGenerator(const ParallelCorpus& corpus, PipelineConfig config, std::uint64_t seed,
                const std::vector<PharaohAlignment>* precomputed = nullptr)
      : corpus_(&corpus),
        config_(config),
        seed_(seed),
        scores_(tfidf_scores(corpus)),
        noise_pool_(target_noise_pool(corpus)),
        precomputed_(precomputed) {
    if (precomputed_ && precomputed_->size() != corpus.size())
      throw DataError("alignment file has " + std::to_string(precomputed_->size()) +
                      " lines, corpus has " + std::to_string(corpus.size()));
    if (config_.pseudo_terms && !precomputed_)
      aligner_ = train_aligner(corpus, config_.em_iterations);
  }

  /// Example for pair `index` in `epoch`; pass epoch 0 to freeze constraints.
  TrainingExample example(std::size_t index, std::uint64_t epoch = 0) const {
    Rng rng(mix_seed(seed_, epoch, index));
    AlignmentSource src;
    src.threshold = config_.align_threshold;
    if (precomputed_)
      src.links = &(*precomputed_)[index];
    else
      src.model = &aligner_;
    return build_training_example(corpus_->pairs[index], scores_.scores[index], src, rng, config_,
                                  noise_pool_);
  }

  std::size_t size() const { return corpus_->size(); }
  const ScoreTable& scores() const { return scores_; }
  const AlignmentModel& aligner() const { return aligner_; }
  const PipelineConfig& config() const { return config_; }
  const std::vector<TokenId>& noise_pool() const { return noise_pool_; }

 private:
  const ParallelCorpus* corpus_;
  PipelineConfig config_;
  std::uint64_t seed_;
  ScoreTable scores_;
  std::vector<TokenId> noise_pool_;
  AlignmentModel aligner_;
  const std::vector<PharaohAlignment>* precomputed_;
};

// ---------------------------------------------------------------------------
// Serialization (JSON lines, explicit integer fields)

namespace detail {
inline nlohmann::ordered_json labels_json(const std::vector<EditLabel>& labels) {
  auto j = nlohmann::ordered_json::array();
  for (auto l : labels) j.push_back(static_cast<int>(l));
  return j;
}
}  // namespace detail

inline nlohmann::ordered_json to_json(const TrainingExample& ex) {
  nlohmann::ordered_json j;
  j["source"] = ex.source;
  j["reference"] = ex.reference;
  j["alignment_labels"] = ex.alignment_labels;
  j["pseudo_terms"] = ex.pseudo_terms.constraints;
  j["term_positions"] = ex.term_positions;
  j["fragment"] = ex.fragment;
  j["kept_positions"] = ex.kept_positions;
  auto mask = [](const ProtectionMask& m) {
    std::vector<int> v(m.begin(), m.end());
    return v;
  };
  j["fragment_protect"] = mask(ex.fragment_protect);
  j["placeholder_counts"] = ex.placeholder_counts;
  j["token_fills"] = ex.token_fills;
  j["candidate"] = ex.candidate;
  j["candidate_protect"] = mask(ex.candidate_protect);
  j["deletion_labels"] = detail::labels_json(ex.deletion_labels);
  return j;
}

inline TrainingExample training_example_from_json(const nlohmann::json& j) {
  TrainingExample ex;
  try {
    ex.source = j.at("source").get<Sentence>();
    ex.reference = j.at("reference").get<Sentence>();
    ex.alignment_labels = j.at("alignment_labels").get<AlignmentLabels>();
    ex.pseudo_terms.constraints = j.at("pseudo_terms").get<std::vector<Sentence>>();
    ex.term_positions = j.at("term_positions").get<std::vector<std::size_t>>();
    ex.fragment = j.at("fragment").get<Sentence>();
    ex.kept_positions = j.at("kept_positions").get<std::vector<std::size_t>>();
    for (int v : j.at("fragment_protect").get<std::vector<int>>()) ex.fragment_protect.push_back(v);
    ex.placeholder_counts = j.at("placeholder_counts").get<std::vector<int>>();
    ex.token_fills = j.at("token_fills").get<Sentence>();
    ex.candidate = j.at("candidate").get<Sentence>();
    for (int v : j.at("candidate_protect").get<std::vector<int>>())
      ex.candidate_protect.push_back(v);
    for (int v : j.at("deletion_labels").get<std::vector<int>>())
      ex.deletion_labels.push_back(v ? EditLabel::kDelete : EditLabel::kKeep);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed training example: ") + e.what());
  }
  return ex;
}

/// Counts protection violations: protected candidate tokens labeled delete,
/// and pseudo-term positions missing from the insertion fragment.
struct ProtectionAudit {
  std::size_t deleted_protected = 0;
  std::size_t missing_from_fragment = 0;
  std::size_t protected_tokens = 0;
  std::size_t total() const { return deleted_protected + missing_from_fragment; }
};

inline void audit_protection(const TrainingExample& ex, ProtectionAudit& audit) {
  for (std::size_t i = 0; i < ex.candidate.size(); ++i) {
    if (!ex.candidate_protect[i]) continue;
    ++audit.protected_tokens;
    if (ex.deletion_labels[i] == EditLabel::kDelete) ++audit.deleted_protected;
  }
  for (std::size_t p : ex.term_positions) {
    ++audit.protected_tokens;
    auto it = std::find(ex.kept_positions.begin(), ex.kept_positions.end(), p);
    if (it == ex.kept_positions.end() ||
        ex.fragment[static_cast<std::size_t>(it - ex.kept_positions.begin())] != ex.reference[p])
      ++audit.missing_from_fragment;
  }
}

// ---------------------------------------------------------------------------
// Constraint file (TSV: sentence_index <TAB> target_term [<TAB> source_term])

struct ConstraintRecord {
  std::size_t sentence_index = 0;
  Sentence target_term;
  std::optional<Sentence> source_term;
};

/// One ConstraintSet per corpus sentence; `sentences` bounds the indices.
inline std::vector<ConstraintSet> load_constraint_file(const std::string& path,
                                                       const Vocabulary& vocab,
                                                       std::size_t sentences,
                                                       std::vector<ConstraintRecord>* records =
                                                           nullptr) {
  std::vector<ConstraintSet> sets(sentences);
  auto lines = read_lines(path);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const auto& line = lines[ln];
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    auto where = path + ":" + std::to_string(ln + 1);
    if (cols.size() < 2 || cols.size() > 3) throw DataError(where + ": expected 2 or 3 columns");
    std::size_t idx = 0;
    try {
      std::size_t used = 0;
      idx = std::stoul(cols[0], &used);
      if (used != cols[0].size()) throw std::invalid_argument(cols[0]);
    } catch (const std::logic_error&) {
      throw DataError(where + ": bad sentence index '" + cols[0] + "'");
    }
    if (idx >= sentences)
      throw DataError(where + ": sentence index " + std::to_string(idx) +
                      " out of range (corpus has " + std::to_string(sentences) + " sentences)");
    auto term = tokenize(cols[1], vocab);
    if (term.empty()) throw DataError(where + ": empty target term");
    sets[idx].constraints.push_back(term);
    if (records) {
      ConstraintRecord rec{idx, term, std::nullopt};
      if (cols.size() == 3 && !cols[2].empty()) rec.source_term = tokenize(cols[2], vocab);
      records->push_back(std::move(rec));
    }
  }
  return sets;
}

inline std::vector<std::string> format_constraint_file(std::span<const ConstraintSet> sets,
                                                       const Vocabulary& vocab) {
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < sets.size(); ++i)
    for (const auto& c : sets[i].constraints)
      lines.push_back(std::to_string(i) + "\t" + detokenize(c, vocab));
  return lines;
}

}  // namespace act
