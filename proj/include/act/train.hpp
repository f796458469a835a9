#pragma once

// Imitation-learning training loop (Adam with warmup) for the three variants:
// plain LevT-style training, constrained training (CT), and CT with
// alignment prompting (ACT).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "act/decode.hpp"
#include "act/model.hpp"
#include "act/pipeline.hpp"

namespace act {

enum class Variant { kBaseline, kCT, kACT };

inline Variant parse_variant(std::string_view s) {
  if (s == "baseline") return Variant::kBaseline;
  if (s == "ct" || s == "CT") return Variant::kCT;
  if (s == "act" || s == "ACT") return Variant::kACT;
  throw UsageError("unknown variant '" + std::string(s) + "' (baseline, ct, act)");
}

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kCT: return "ct";
    case Variant::kACT: return "act";
  }
  return "?";
}

inline bool uses_pseudo_terms(Variant v) { return v != Variant::kBaseline; }
inline bool uses_alignment(Variant v) { return v == Variant::kACT; }

struct TrainConfig {
  long steps = 3000;
  int batch_size = 16;
  int warmup_steps = 400;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double clip_norm = 0.0;  // 0 disables clipping
  /// Reuse epoch-0 examples every epoch instead of regenerating them.
  bool freeze_examples = false;
  /// Probability of replacing the noised deletion candidate by the model's
  /// own greedy insertion output on the fragment.
  double rollout_prob = 0.0;
  PipelineConfig pipeline;
};

/// Linear warmup, then inverse square-root decay.
inline double learning_rate_at(long step, double base, int warmup) {
  const double s = static_cast<double>(step);
  if (warmup <= 0) return base;
  const double w = static_cast<double>(warmup);
  return base * std::min(s / w, std::sqrt(w / s));
}

class Adam {
 public:
  Adam(const ModelParams& like, double beta1, double beta2, double eps)
      : m_(zeros_like(like)), v_(zeros_like(like)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ModelParams& params, const ModelParams& grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::vector<Matrix*> ms, vs;
    for_each_tensor(m_, [&](const std::string&, Matrix& x) { ms.push_back(&x); });
    for_each_tensor(v_, [&](const std::string&, Matrix& x) { vs.push_back(&x); });
    std::size_t i = 0;
    for_each_tensor_pair(params, grad, [&](const std::string&, Matrix& w, const Matrix& g) {
      Matrix& m = *ms[i];
      Matrix& v = *vs[i];
      ++i;
      m = beta1_ * m + (1.0 - beta1_) * g;
      v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
      w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    });
  }

  long steps() const { return t_; }

 private:
  ModelParams m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

/// Replaces the deletion sub-example by the model's greedy insertion of the
/// fragment, labeled against the reference. Falls back to the stored
/// candidate if the rollout would exceed the model length.
inline void rollout_deletion_candidate(TrainingExample& ex, const ModelParams& p,
                                       const ModelConfig& cfg, bool use_alignment) {
  AlignmentLabels labels = model_labels(ex, use_alignment);
  Matrix enc = encode(ex.source, labels, p, cfg);
  DecodeState st;
  st.sequence = frame(ex.fragment);
  st.protect.assign(st.sequence.size(), true);
  for (std::size_t i = 0; i < ex.fragment.size(); ++i) st.protect[i + 1] = ex.fragment_protect[i];
  st.constraint_id.assign(st.sequence.size(), 0);
  // Insertion only: run an iteration on a state whose tokens are all protected.
  DecodeState ins = st;
  ins.protect.assign(st.sequence.size(), true);
  DecodeConfig dc;
  dc.mode = DecodeMode::kSoft;
  dc.length_cap = cfg.max_len;
  DecodeState out = decode_iteration(ins, enc, p, cfg, dc);
  if (out.truncated) return;
  // Map protection back: protected fragment tokens are the survivors flagged
  // in `st`, which `out` lists in order among non-inserted positions.
  Sentence cand(out.sequence.begin() + 1, out.sequence.end() - 1);
  ProtectionMask protect(cand.size(), false);
  {
    std::size_t frag = 0;
    for (std::size_t i = 0; i < cand.size() && frag < ex.fragment.size(); ++i) {
      if (out.protect[i + 1] && out.constraint_id[i + 1] == 0 && frag < ex.fragment.size() &&
          cand[i] == ex.fragment[frag]) {
        protect[i] = ex.fragment_protect[frag];
        ++frag;
      }
    }
  }
  if (cand.empty()) return;
  ex.candidate = std::move(cand);
  ex.candidate_protect = std::move(protect);
  ex.deletion_labels = deletion_labels(ex.candidate, ex.reference, ex.candidate_protect);
}

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_trace;  // mean example loss per step
  long steps = 0;
};

using TrainProgress = std::function<void(long step, double loss, const ModelParams&)>;

inline PipelineConfig pipeline_for(Variant v, PipelineConfig base) {
  base.pseudo_terms = uses_pseudo_terms(v);
  return base;
}

/// Mini-batch Adam on examples generated on the fly from `corpus`.
/// `initial` resumes from given parameters (optimizer state starts fresh).
inline TrainResult train(const ParallelCorpus& corpus, const ModelConfig& cfg, Variant variant,
                         const TrainConfig& tc, const ModelParams* initial = nullptr,
                         const TrainProgress& progress = {},
                         const std::vector<PharaohAlignment>* alignments = nullptr) {
  cfg.validate();
  if (corpus.empty()) throw DataError("train: empty corpus");
  if (tc.batch_size < 1) throw UsageError("train: batch_size must be >= 1");
  PipelineConfig pc = pipeline_for(variant, tc.pipeline);
  pc.k_max = cfg.k_max;
  DataGenerator gen(corpus, pc, stream_seed(cfg.seed, "datagen"), alignments);
  const bool align = uses_alignment(variant);

  TrainResult result;
  result.params = initial ? *initial : init_params(cfg);
  Adam adam(result.params, tc.beta1, tc.beta2, tc.adam_eps);
  ModelParams grad = zeros_like(result.params);
  const std::uint64_t train_seed = stream_seed(cfg.seed, "train");

  std::vector<std::size_t> order;
  std::uint64_t epoch = 0;
  std::size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      order.resize(corpus.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng shuffle_rng(mix_seed(train_seed, epoch));
      shuffle_rng.shuffle(order);
      ++epoch;
      cursor = 0;
    }
    return std::pair{order[cursor++], epoch - 1};
  };

  for (long step = 1; step <= tc.steps; ++step) {
    for_each_tensor(grad, [](const std::string&, Matrix& m) { m.setZero(); });
    double batch_loss = 0.0;
    for (int b = 0; b < tc.batch_size; ++b) {
      auto [idx, ep] = next_index();
      TrainingExample ex = gen.example(idx, tc.freeze_examples ? 0 : ep);
      if (tc.rollout_prob > 0.0) {
        Rng r(mix_seed(train_seed, 0x726f6c6cULL, ep, idx));
        if (r.bernoulli(tc.rollout_prob)) rollout_deletion_candidate(ex, result.params, cfg, align);
      }
      batch_loss += gradients(ex, result.params, cfg, grad, align);
    }
    const double inv = 1.0 / tc.batch_size;
    for_each_tensor(grad, [&](const std::string&, Matrix& m) { m *= inv; });
    double mean_loss = batch_loss * inv;
    if (!std::isfinite(mean_loss))
      throw NumericDivergence("training diverged (loss " + std::to_string(mean_loss) + ") at step " +
                                  std::to_string(step),
                              step);
    if (tc.clip_norm > 0.0) {
      double sq = 0.0;
      for_each_tensor(grad, [&](const std::string&, const Matrix& m) { sq += m.squaredNorm(); });
      double norm = std::sqrt(sq);
      if (norm > tc.clip_norm)
        for_each_tensor(grad, [&](const std::string&, Matrix& m) { m *= tc.clip_norm / norm; });
    }
    adam.step(result.params, grad, learning_rate_at(step, cfg.learning_rate, tc.warmup_steps));
    result.loss_trace.push_back(mean_loss);
    result.steps = step;
    if (progress) progress(step, mean_loss, result.params);
  }
  if (!all_finite(result.params))
    throw NumericDivergence("parameters became non-finite", result.steps);
  return result;
}

/// Fraction of placeholder fills where the token head's argmax equals the
/// expert token.
inline double token_head_accuracy(std::span<const TrainingExample> examples, const ModelParams& p,
                                  const ModelConfig& cfg, bool use_alignment) {
  std::size_t hit = 0, total = 0;
  for (const auto& ex : examples) {
    if (ex.token_fills.empty()) continue;
    Matrix enc = encode(ex.source, model_labels(ex, use_alignment), p, cfg);
    Sentence expanded = insert_placeholders(frame(ex.fragment), ex.placeholder_counts);
    Matrix h = decoder_forward(enc, expanded, p, cfg);
    Matrix logits = token_logits(h, expanded, p);
    for (std::size_t k = 0; k < ex.token_fills.size(); ++k) {
      hit += argmax_fill(logits.row(static_cast<Eigen::Index>(k))) == ex.token_fills[k];
      ++total;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 1.0;
}

}  // namespace act
