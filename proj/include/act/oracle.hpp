#pragma once

// Levenshtein expert policy: edit distances, deletion/insertion labels with
// protected spans, reference corruption, and minimal edit scripts.
//
// Slot convention: a sequence s of n tokens framed as <s> s </s> has n+1
// insertion slots; slot i sits between framed positions i and i+1.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "act/core.hpp"
#include "act/random.hpp"

namespace act {

/// true = token may not be deleted.
using ProtectionMask = std::vector<bool>;

enum class EditLabel : std::uint8_t { kKeep = 0, kDelete = 1 };

struct EditScript {
  std::vector<EditLabel> deletion_labels;  // one per token of the current sequence
  std::vector<int> placeholder_counts;     // one per slot of the post-deletion sequence
  Sentence token_fills;                    // one per emitted placeholder, left to right

  std::size_t deletions() const {
    return static_cast<std::size_t>(
        std::count(deletion_labels.begin(), deletion_labels.end(), EditLabel::kDelete));
  }
  std::size_t insertions() const {
    std::size_t n = 0;
    for (int c : placeholder_counts) n += static_cast<std::size_t>(c);
    return n;
  }
  std::size_t edit_count() const { return deletions() + insertions(); }
  bool operator==(const EditScript&) const = default;
};

struct FragmentRecord {
  Sentence fragment;
  std::vector<std::size_t> kept_positions;  // strictly increasing reference indices
  bool operator==(const FragmentRecord&) const = default;
};

inline ProtectionMask no_protection(std::size_t n) { return ProtectionMask(n, false); }

/// Token-level edit distance with unit insert/delete/substitute costs.
inline std::size_t levenshtein_distance(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

namespace detail {

inline constexpr long kUnmatchedKept = -2;
inline constexpr long kDeleted = -1;

/// Monotone matching of candidate tokens to reference positions that never
/// deletes a protected token. Entry i is the matched reference index, kDeleted,
/// or kUnmatchedKept (protected token with no usable partner).
///
/// First minimizes unmatched protected tokens, then insert+delete count.
/// Backtrace priority at each cell is match > insert > delete, which keeps the
/// earliest candidate tokens among equal-cost matchings.
inline std::vector<long> protected_matching(std::span<const TokenId> cand,
                                            std::span<const TokenId> ref,
                                            const ProtectionMask& protect) {
  const std::size_t n = cand.size(), m = ref.size();
  if (protect.size() != n)
    throw UsageError("protection mask length " + std::to_string(protect.size()) +
                     " != candidate length " + std::to_string(n));
  // Unmatched protected tokens cost more than any number of ordinary edits.
  const long big = static_cast<long>(n + m + 1);
  const std::size_t w = m + 1;
  std::vector<long> cost((n + 1) * w);
  auto at = [&](std::size_t i, std::size_t j) -> long& { return cost[i * w + j]; };
  auto drop_cost = [&](std::size_t i) { return protect[i] ? big : 1L; };

  for (std::size_t j = 0; j <= m; ++j) at(n, j) = static_cast<long>(m - j);
  for (std::size_t i = n; i-- > 0;) {
    at(i, m) = at(i + 1, m) + drop_cost(i);
    for (std::size_t j = m; j-- > 0;) {
      long best = drop_cost(i) + at(i + 1, j);
      best = std::min(best, 1 + at(i, j + 1));
      if (cand[i] == ref[j]) best = std::min(best, at(i + 1, j + 1));
      at(i, j) = best;
    }
  }

  std::vector<long> match(n, kDeleted);
  std::size_t i = 0, j = 0;
  while (i < n) {
    if (j < m && cand[i] == ref[j] && at(i, j) == at(i + 1, j + 1)) {
      match[i] = static_cast<long>(j);
      ++i, ++j;
    } else if (j < m && at(i, j) == 1 + at(i, j + 1)) {
      ++j;
    } else {
      match[i] = protect[i] ? kUnmatchedKept : kDeleted;
      ++i;
    }
  }
  return match;
}

}  // namespace detail

/// Keep/delete label per candidate token; protected tokens are always kept.
inline std::vector<EditLabel> deletion_labels(std::span<const TokenId> candidate,
                                              std::span<const TokenId> reference,
                                              const ProtectionMask& protect) {
  auto match = detail::protected_matching(candidate, reference, protect);
  std::vector<EditLabel> labels(candidate.size());
  for (std::size_t i = 0; i < match.size(); ++i)
    labels[i] = match[i] == detail::kDeleted ? EditLabel::kDelete : EditLabel::kKeep;
  return labels;
}

struct InsertionLabels {
  std::vector<int> placeholder_counts;
  Sentence token_fills;
};

/// Placeholder counts and fills that turn `record.fragment` into `reference`.
/// Throws KmaxOverflow if a gap exceeds k_max.
inline InsertionLabels insertion_labels(const FragmentRecord& record,
                                        std::span<const TokenId> reference, int k_max) {
  const auto& kept = record.kept_positions;
  if (kept.size() != record.fragment.size())
    throw DataError("fragment record: kept_positions length mismatch");
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (kept[i] >= reference.size() || (i > 0 && kept[i] <= kept[i - 1]) ||
        record.fragment[i] != reference[kept[i]])
      throw DataError("fragment record is not a subsequence record of the reference");
  }
  InsertionLabels out;
  out.placeholder_counts.reserve(kept.size() + 1);
  std::size_t begin = 0;
  for (std::size_t slot = 0; slot <= kept.size(); ++slot) {
    std::size_t end = slot < kept.size() ? kept[slot] : reference.size();
    std::size_t gap = end - begin;
    if (static_cast<long>(gap) > k_max)
      throw KmaxOverflow("insertion gap of " + std::to_string(gap) + " tokens exceeds K_max=" +
                         std::to_string(k_max));
    out.placeholder_counts.push_back(static_cast<int>(gap));
    out.token_fills.insert(out.token_fills.end(), reference.begin() + static_cast<long>(begin),
                           reference.begin() + static_cast<long>(end));
    begin = end + 1;
  }
  return out;
}

/// Random deletion of unprotected tokens, then gap repair so that every
/// insertion gap fits in k_max.
inline FragmentRecord corrupt_for_insertion(std::span<const TokenId> reference,
                                            const ProtectionMask& protect, double deletion_prob,
                                            Rng& rng, int k_max) {
  if (protect.size() != reference.size())
    throw UsageError("protection mask length != reference length");
  if (!(deletion_prob >= 0.0 && deletion_prob <= 1.0))
    throw UsageError("deletion_prob must be in [0, 1]");
  if (k_max < 1) throw UsageError("K_max must be >= 1");
  const std::size_t n = reference.size();
  std::vector<bool> keep(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Draw for every position so the stream does not depend on the mask.
    bool drop = rng.bernoulli(deletion_prob);
    keep[i] = protect[i] || !drop;
  }
  for (bool repaired = true; repaired;) {
    repaired = false;
    std::size_t begin = 0;
    for (std::size_t i = 0; i <= n; ++i) {
      if (i < n && !keep[i]) continue;
      if (static_cast<long>(i - begin) > k_max) {
        keep[begin + (i - begin) / 2] = true;
        repaired = true;
      }
      begin = i + 1;
    }
  }
  FragmentRecord rec;
  for (std::size_t i = 0; i < n; ++i) {
    if (!keep[i]) continue;
    rec.fragment.push_back(reference[i]);
    rec.kept_positions.push_back(i);
  }
  return rec;
}

/// Deletions followed by insertions that edit `current` into `target` with the
/// fewest insert/delete operations among scripts that never delete a
/// protected token.
///
/// If some protected token cannot be matched in order, it is kept and the
/// target tokens of its gap are inserted in the slot left of it; the script
/// then does not reproduce the target.
inline EditScript optimal_edit_script(std::span<const TokenId> current,
                                      std::span<const TokenId> target,
                                      const ProtectionMask& protect, int k_max) {
  auto match = detail::protected_matching(current, target, protect);
  EditScript script;
  script.deletion_labels.resize(current.size());
  std::vector<long> survivors;  // matched target index or kUnmatchedKept
  for (std::size_t i = 0; i < match.size(); ++i) {
    bool del = match[i] == detail::kDeleted;
    script.deletion_labels[i] = del ? EditLabel::kDelete : EditLabel::kKeep;
    if (!del) survivors.push_back(match[i]);
  }
  std::size_t begin = 0;  // next target index not yet produced
  auto emit_gap = [&](std::size_t end) {
    std::size_t gap = end - begin;
    if (static_cast<long>(gap) > k_max)
      throw KmaxOverflow("insertion gap of " + std::to_string(gap) + " tokens exceeds K_max=" +
                         std::to_string(k_max));
    script.placeholder_counts.push_back(static_cast<int>(gap));
    script.token_fills.insert(script.token_fills.end(), target.begin() + static_cast<long>(begin),
                              target.begin() + static_cast<long>(end));
    begin = end;
  };
  for (long s : survivors) {
    if (s == detail::kUnmatchedKept) {
      // Flush the pending gap up to the next matched survivor into this slot.
      std::size_t next = target.size();
      for (long t : survivors)
        if (t >= static_cast<long>(begin)) {
          next = static_cast<std::size_t>(t);
          break;
        }
      emit_gap(next);
    } else {
      emit_gap(static_cast<std::size_t>(s));
      begin = static_cast<std::size_t>(s) + 1;
    }
  }
  emit_gap(target.size());
  return script;
}

/// Deletes, inserts placeholders, then fills them left to right.
inline Sentence apply_edit_script(std::span<const TokenId> current, const EditScript& script) {
  if (script.deletion_labels.size() != current.size())
    throw DataError("edit script: deletion labels do not match sequence length");
  Sentence kept;
  for (std::size_t i = 0; i < current.size(); ++i)
    if (script.deletion_labels[i] == EditLabel::kKeep) kept.push_back(current[i]);
  if (script.placeholder_counts.size() != kept.size() + 1)
    throw DataError("edit script: slot count does not match surviving sequence");
  if (script.token_fills.size() != script.insertions())
    throw DataError("edit script: fill count does not match placeholder total");
  Sentence out;
  std::size_t fill = 0;
  for (std::size_t slot = 0; slot <= kept.size(); ++slot) {
    for (int c = 0; c < script.placeholder_counts[slot]; ++c)
      out.push_back(script.token_fills[fill++]);
    if (slot < kept.size()) out.push_back(kept[slot]);
  }
  return out;
}

/// Inserts count[i] placeholders into slot i of the framed sequence <s> s </s>.
inline Sentence insert_placeholders(std::span<const TokenId> framed, std::span<const int> counts) {
  if (framed.size() < 2 || counts.size() != framed.size() - 1)
    throw DataError("placeholder counts do not match framed sequence slots");
  Sentence out;
  for (std::size_t i = 0; i < framed.size(); ++i) {
    out.push_back(framed[i]);
    if (i < counts.size())
      for (int c = 0; c < counts[i]; ++c) out.push_back(reserved::kPlh);
  }
  return out;
}

inline Sentence frame(std::span<const TokenId> s) {
  Sentence out;
  out.reserve(s.size() + 2);
  out.push_back(reserved::kBos);
  out.insert(out.end(), s.begin(), s.end());
  out.push_back(reserved::kEos);
  return out;
}

}  // namespace act
