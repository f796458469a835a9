#pragma once

// Iterative refinement decoding: start from <s> C_1 … C_k </s>, then repeat
// delete → insert placeholders → fill until the sequence stops changing.

#include <string>
#include <vector>

#include "act/core.hpp"
#include "act/model.hpp"
#include "act/oracle.hpp"

namespace act {

enum class DecodeMode { kUnconstrained, kSoft, kHard };

inline DecodeMode parse_decode_mode(std::string_view s) {
  if (s == "none" || s == "unconstrained") return DecodeMode::kUnconstrained;
  if (s == "soft") return DecodeMode::kSoft;
  if (s == "hard") return DecodeMode::kHard;
  throw UsageError("unknown decode mode '" + std::string(s) + "' (none, soft, hard)");
}

inline std::string_view to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::kUnconstrained: return "none";
    case DecodeMode::kSoft: return "soft";
    case DecodeMode::kHard: return "hard";
  }
  return "?";
}

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kUnconstrained;
  int max_iterations = 10;
  int length_cap = 200;  // framed tokens

  void validate() const {
    if (max_iterations < 1) throw UsageError("decode config: max_iterations must be >= 1");
    if (length_cap < 2) throw UsageError("decode config: length_cap must be >= 2");
  }
};

struct DecodeState {
  Sentence sequence;               // framed: <s> … </s>
  ProtectionMask protect;          // boundaries always protected
  std::vector<int> constraint_id;  // i >= 1 for tokens of C_i, 0 otherwise
  int iteration = 0;
  bool converged = false;
  bool truncated = false;  // a length-cap overflow cut placeholder counts

  std::size_t protected_count() const {
    return static_cast<std::size_t>(std::count(protect.begin(), protect.end(), true));
  }
};

inline DecodeState init_state(const ConstraintSet& constraints, DecodeMode mode) {
  DecodeState st;
  st.sequence.push_back(reserved::kBos);
  st.protect.push_back(true);
  st.constraint_id.push_back(0);
  if (mode != DecodeMode::kUnconstrained) {
    for (std::size_t i = 0; i < constraints.size(); ++i)
      for (TokenId t : constraints.constraints[i]) {
        st.sequence.push_back(t);
        st.protect.push_back(mode == DecodeMode::kHard);
        st.constraint_id.push_back(static_cast<int>(i + 1));
      }
  }
  st.sequence.push_back(reserved::kEos);
  st.protect.push_back(true);
  st.constraint_id.push_back(0);
  return st;
}

/// Best token for a placeholder; reserved symbols other than UNK are never
/// emitted so that framing stays intact.
inline TokenId argmax_fill(const Eigen::Ref<const Eigen::RowVectorXd>& logits) {
  TokenId best = reserved::kUnk;
  double best_v = -std::numeric_limits<double>::infinity();
  for (Eigen::Index v = 0; v < logits.size(); ++v) {
    auto id = static_cast<TokenId>(v);
    if (reserved::is_reserved(id) && id != reserved::kUnk) continue;
    if (logits(v) > best_v) best_v = logits(v), best = id;
  }
  return best;
}

inline int argmax(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  Eigen::Index i = 0;
  row.maxCoeff(&i);
  return static_cast<int>(i);
}

/// One delete → insert → fill step.
inline DecodeState decode_iteration(const DecodeState& state, const Matrix& source_states,
                                    const ModelParams& p, const ModelConfig& cfg,
                                    const DecodeConfig& dcfg) {
  DecodeState next;
  next.iteration = state.iteration + 1;
  next.truncated = state.truncated;
  const bool hard = dcfg.mode == DecodeMode::kHard;

  // Deletion.
  if (state.sequence.size() > 2) {
    Matrix h = decoder_forward(source_states, state.sequence, p, cfg);
    Matrix logits = deletion_logits(h, p);
    for (std::size_t i = 0; i < state.sequence.size(); ++i) {
      bool boundary = i == 0 || i + 1 == state.sequence.size();
      bool drop = !boundary && !state.protect[i] &&
                  argmax(logits.row(static_cast<Eigen::Index>(i - 1))) == 1;
      if (drop) continue;
      next.sequence.push_back(state.sequence[i]);
      next.protect.push_back(state.protect[i]);
      next.constraint_id.push_back(state.constraint_id[i]);
    }
  } else {
    next.sequence = state.sequence;
    next.protect = state.protect;
    next.constraint_id = state.constraint_id;
  }

  // Placeholder insertion.
  {
    Matrix h = decoder_forward(source_states, next.sequence, p, cfg);
    Matrix logits = placeholder_logits(h, p);
    std::vector<int> counts(static_cast<std::size_t>(logits.rows()));
    for (std::size_t s = 0; s < counts.size(); ++s) {
      counts[s] = argmax(logits.row(static_cast<Eigen::Index>(s)));
      int left = next.constraint_id[s], right = next.constraint_id[s + 1];
      if (hard && left != 0 && left == right) counts[s] = 0;  // keep terms contiguous
    }
    const long cap = std::min(dcfg.length_cap, cfg.max_len);
    long total = static_cast<long>(next.sequence.size());
    for (int c : counts) total += c;
    for (std::size_t s = counts.size(); total > cap && s-- > 0;) {
      long cut = std::min<long>(counts[s], total - cap);
      counts[s] -= static_cast<int>(cut);
      total -= cut;
      next.truncated = true;
    }
    Sentence expanded;
    ProtectionMask protect;
    std::vector<int> ids;
    for (std::size_t i = 0; i < next.sequence.size(); ++i) {
      expanded.push_back(next.sequence[i]);
      protect.push_back(next.protect[i]);
      ids.push_back(next.constraint_id[i]);
      if (i < counts.size())
        for (int c = 0; c < counts[i]; ++c) {
          expanded.push_back(reserved::kPlh);
          protect.push_back(false);
          ids.push_back(0);
        }
    }
    next.sequence = std::move(expanded);
    next.protect = std::move(protect);
    next.constraint_id = std::move(ids);
  }

  // Token fill.
  auto plh = placeholder_positions(next.sequence);
  if (!plh.empty()) {
    Matrix h = decoder_forward(source_states, next.sequence, p, cfg);
    Matrix logits = token_logits(h, next.sequence, p);
    for (std::size_t k = 0; k < plh.size(); ++k)
      next.sequence[plh[k]] = argmax_fill(logits.row(static_cast<Eigen::Index>(k)));
  }

  next.converged = next.sequence == state.sequence;
  return next;
}

struct DecodeResult {
  Sentence tokens;  // unframed
  int iterations = 0;
  bool converged = false;
  bool truncated = false;
  long clamped_labels = 0;
};

inline DecodeResult decode(std::span<const TokenId> source, const ConstraintSet& constraints,
                           std::span<const int> labels, const ModelParams& p,
                           const ModelConfig& cfg, const DecodeConfig& dcfg,
                           std::vector<DecodeState>* trace = nullptr) {
  dcfg.validate();
  EncodeStats stats;
  Matrix enc = encode(source, labels, p, cfg, &stats);
  DecodeState st = init_state(constraints, dcfg.mode);
  if (trace) trace->push_back(st);
  while (!st.converged && st.iteration < dcfg.max_iterations) {
    st = decode_iteration(st, enc, p, cfg, dcfg);
    if (trace) trace->push_back(st);
  }
  DecodeResult r;
  r.tokens.assign(st.sequence.begin() + 1, st.sequence.end() - 1);
  r.iterations = st.iteration;
  r.converged = st.converged;
  r.truncated = st.truncated;
  r.clamped_labels = stats.clamped_labels;
  return r;
}

}  // namespace act
