#pragma once

// Encoder-decoder editing model: token + position + alignment embeddings,
// post-norm single-head transformer layers, and the placeholder, token and
// deletion classifiers. Loss and gradients are computed analytically.

#include <bit>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "act/core.hpp"
#include "act/errors.hpp"
#include "act/nn.hpp"
#include "act/oracle.hpp"
#include "act/pipeline.hpp"
#include "act/random.hpp"

namespace act {

using nn::Matrix;

struct ModelConfig {
  int d_model = 32;
  int n_layers = 2;
  int d_ff = 64;
  int k_max = 8;
  int max_len = 64;  // longest framed sequence (and source)
  int vocab_size = 0;
  int n_constraint_labels = 4;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;

  void validate() const {
    if (d_model < 1 || n_layers < 0 || d_ff < 1 || max_len < 2 || vocab_size < reserved::kCount)
      throw UsageError("model config: dimensions must be positive and vocab_size >= 5");
    if (k_max < 1) throw UsageError("model config: K_max must be >= 1");
    if (n_constraint_labels < 1) throw UsageError("model config: n_constraint_labels must be >= 1");
  }
  bool operator==(const ModelConfig&) const = default;
};

struct EncoderLayerParams {
  nn::Attention self_attn;
  nn::LayerNorm attn_norm;
  nn::FeedForward ffn;
  nn::LayerNorm ffn_norm;
};

struct DecoderLayerParams {
  nn::Attention self_attn;
  nn::LayerNorm self_norm;
  nn::Attention cross_attn;
  nn::LayerNorm cross_norm;
  nn::FeedForward ffn;
  nn::LayerNorm ffn_norm;
};

struct ModelParams {
  Matrix token_embedding;      // vocab × d
  Matrix position_embedding;   // max_len × d, shared by encoder and decoder
  Matrix alignment_embedding;  // labels × d; row 0 ("unaligned") is fixed at zero
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  nn::Linear placeholder_head;  // 2d → K_max + 1
  nn::Linear token_head;        // d → vocab
  nn::Linear deletion_head;     // d → 2 (keep, delete)
};

namespace detail {
template <class P, class F>
void visit_linear(P& l, const std::string& name, F& f) {
  f(name + ".weight", l.weight);
  f(name + ".bias", l.bias);
}
template <class P, class F>
void visit_attention(P& a, const std::string& name, F& f) {
  visit_linear(a.query, name + ".query", f);
  visit_linear(a.key, name + ".key", f);
  visit_linear(a.value, name + ".value", f);
  visit_linear(a.output, name + ".output", f);
}
template <class P, class F>
void visit_norm(P& n, const std::string& name, F& f) {
  f(name + ".gain", n.gain);
  f(name + ".bias", n.bias);
}
}  // namespace detail

/// Calls f(name, tensor) for every tensor in declaration order.
template <class Params, class F>
  requires std::same_as<std::remove_const_t<Params>, ModelParams>
void for_each_tensor(Params& p, F&& f) {
  f(std::string("token_embedding"), p.token_embedding);
  f(std::string("position_embedding"), p.position_embedding);
  f(std::string("alignment_embedding"), p.alignment_embedding);
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    auto& e = p.encoder[l];
    std::string n = "encoder." + std::to_string(l);
    detail::visit_attention(e.self_attn, n + ".self_attn", f);
    detail::visit_norm(e.attn_norm, n + ".attn_norm", f);
    detail::visit_linear(e.ffn.inner, n + ".ffn.inner", f);
    detail::visit_linear(e.ffn.outer, n + ".ffn.outer", f);
    detail::visit_norm(e.ffn_norm, n + ".ffn_norm", f);
  }
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    auto& d = p.decoder[l];
    std::string n = "decoder." + std::to_string(l);
    detail::visit_attention(d.self_attn, n + ".self_attn", f);
    detail::visit_norm(d.self_norm, n + ".self_norm", f);
    detail::visit_attention(d.cross_attn, n + ".cross_attn", f);
    detail::visit_norm(d.cross_norm, n + ".cross_norm", f);
    detail::visit_linear(d.ffn.inner, n + ".ffn.inner", f);
    detail::visit_linear(d.ffn.outer, n + ".ffn.outer", f);
    detail::visit_norm(d.ffn_norm, n + ".ffn_norm", f);
  }
  detail::visit_linear(p.placeholder_head, "placeholder_head", f);
  detail::visit_linear(p.token_head, "token_head", f);
  detail::visit_linear(p.deletion_head, "deletion_head", f);
}

/// Two tensors at the same visit index, for elementwise updates.
template <class F>
void for_each_tensor_pair(ModelParams& a, const ModelParams& b, F&& f) {
  std::vector<const Matrix*> rhs;
  for_each_tensor(b, [&](const std::string&, const Matrix& m) { rhs.push_back(&m); });
  std::size_t i = 0;
  for_each_tensor(a, [&](const std::string& name, Matrix& m) { f(name, m, *rhs[i++]); });
}

inline std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

inline bool all_finite(const ModelParams& p) {
  bool ok = true;
  for_each_tensor(p, [&](const std::string&, const Matrix& m) { ok = ok && m.allFinite(); });
  return ok;
}

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  for_each_tensor(z, [](const std::string&, Matrix& m) { m.setZero(); });
  return z;
}

namespace detail {
inline Matrix uniform_matrix(Eigen::Index r, Eigen::Index c, double a, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-a, a);
  return m;
}
inline nn::Linear make_linear(int in, int out, double a, Rng& rng) {
  return {uniform_matrix(in, out, a, rng), Matrix::Zero(1, out)};
}
inline nn::Linear xavier_linear(int in, int out, Rng& rng) {
  return make_linear(in, out, std::sqrt(6.0 / (in + out)), rng);
}
inline nn::LayerNorm make_norm(int d) { return {Matrix::Ones(1, d), Matrix::Zero(1, d)}; }
inline nn::Attention make_attention(int d, Rng& rng) {
  return {xavier_linear(d, d, rng), xavier_linear(d, d, rng), xavier_linear(d, d, rng),
          xavier_linear(d, d, rng)};
}
inline nn::FeedForward make_ffn(int d, int ff, Rng& rng) {
  return {xavier_linear(d, ff, rng), xavier_linear(ff, d, rng)};
}
}  // namespace detail

/// Embeddings and heads uniform in (-0.1, 0.1), projections Xavier-uniform,
/// biases zero, norms identity, alignment row 0 zero.
inline ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(stream_seed(cfg.seed, "init"));
  const int d = cfg.d_model;
  ModelParams p;
  p.token_embedding = detail::uniform_matrix(cfg.vocab_size, d, 0.1, rng);
  p.position_embedding = detail::uniform_matrix(cfg.max_len, d, 0.1, rng);
  p.alignment_embedding = detail::uniform_matrix(cfg.n_constraint_labels, d, 0.1, rng);
  p.alignment_embedding.row(0).setZero();
  for (int l = 0; l < cfg.n_layers; ++l)
    p.encoder.push_back({detail::make_attention(d, rng), detail::make_norm(d),
                         detail::make_ffn(d, cfg.d_ff, rng), detail::make_norm(d)});
  for (int l = 0; l < cfg.n_layers; ++l)
    p.decoder.push_back({detail::make_attention(d, rng), detail::make_norm(d),
                         detail::make_attention(d, rng), detail::make_norm(d),
                         detail::make_ffn(d, cfg.d_ff, rng), detail::make_norm(d)});
  p.placeholder_head = detail::make_linear(2 * d, cfg.k_max + 1, 0.1, rng);
  p.token_head = detail::make_linear(d, cfg.vocab_size, 0.1, rng);
  p.deletion_head = detail::make_linear(d, 2, 0.1, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Forward passes

struct EncoderLayerCache {
  Matrix input;
  nn::AttentionCache attn;
  nn::LayerNormCache norm1;
  Matrix mid;
  nn::FeedForwardCache ffn;
  nn::LayerNormCache norm2;
};

struct EncoderCache {
  Sentence tokens;
  AlignmentLabels labels;  // after clamping
  std::vector<EncoderLayerCache> layers;
};

struct DecoderLayerCache {
  Matrix input;
  nn::AttentionCache self_attn;
  nn::LayerNormCache norm1;
  Matrix after_self;
  nn::AttentionCache cross_attn;
  nn::LayerNormCache norm2;
  Matrix after_cross;
  nn::FeedForwardCache ffn;
  nn::LayerNormCache norm3;
};

struct DecoderCache {
  Sentence tokens;
  std::vector<bool> key_mask;
  std::vector<DecoderLayerCache> layers;
};

struct EncodeStats {
  long clamped_labels = 0;
};

/// Embedding sum token + position + alignment(label), before any mixing.
inline Matrix encoder_input(std::span<const TokenId> source, std::span<const int> labels,
                            const ModelParams& p, const ModelConfig& cfg) {
  Matrix x(static_cast<Eigen::Index>(source.size()), cfg.d_model);
  for (std::size_t i = 0; i < source.size(); ++i) {
    auto r = static_cast<Eigen::Index>(i);
    x.row(r) = p.token_embedding.row(source[i]) + p.position_embedding.row(r);
    if (labels[i] != 0) x.row(r) += p.alignment_embedding.row(labels[i]);
  }
  return x;
}

namespace detail {
inline void check_tokens(std::span<const TokenId> s, const ModelConfig& cfg, const char* what) {
  for (TokenId t : s)
    if (t < 0 || t >= cfg.vocab_size)
      throw DataError(std::string(what) + ": token id " + std::to_string(t) +
                      " outside model vocabulary");
}
}  // namespace detail

inline Matrix encode(std::span<const TokenId> source, std::span<const int> labels,
                     const ModelParams& p, const ModelConfig& cfg, EncodeStats* stats = nullptr,
                     EncoderCache* cache = nullptr) {
  if (labels.size() != source.size())
    throw DataError("encode: alignment labels length " + std::to_string(labels.size()) +
                    " != source length " + std::to_string(source.size()));
  if (source.empty()) throw DataError("encode: empty source sentence");
  if (static_cast<int>(source.size()) > cfg.max_len)
    throw DataError("encode: source length " + std::to_string(source.size()) + " exceeds max_len " +
                    std::to_string(cfg.max_len));
  detail::check_tokens(source, cfg, "encode");
  AlignmentLabels clamped(labels.begin(), labels.end());
  for (int& l : clamped) {
    if (l < 0) l = 0;
    if (l >= cfg.n_constraint_labels) {
      l = cfg.n_constraint_labels - 1;
      if (stats) ++stats->clamped_labels;
    }
  }
  Matrix x = encoder_input(source, clamped, p, cfg);
  if (cache) {
    cache->tokens.assign(source.begin(), source.end());
    cache->labels = clamped;
    cache->layers.assign(p.encoder.size(), {});
  }
  EncoderLayerCache scratch;
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const auto& layer = p.encoder[l];
    auto& c = cache ? cache->layers[l] : scratch;
    c.input = x;
    Matrix a = nn::forward(layer.self_attn, x, x, nullptr, c.attn);
    c.mid = nn::forward(layer.attn_norm, Matrix(x + a), c.norm1);
    Matrix f = nn::forward(layer.ffn, c.mid, c.ffn);
    x = nn::forward(layer.ffn_norm, Matrix(c.mid + f), c.norm2);
  }
  return x;
}

/// Hidden states of a framed partial sequence. PAD positions are masked as
/// attention keys, so outputs at other positions do not depend on them.
inline Matrix decoder_forward(const Matrix& encoder_states, std::span<const TokenId> framed,
                              const ModelParams& p, const ModelConfig& cfg,
                              DecoderCache* cache = nullptr) {
  if (framed.size() < 2 || framed.front() != reserved::kBos)
    throw DataError("decoder_forward: sequence must be framed with <s> ... </s>");
  if (static_cast<int>(framed.size()) > cfg.max_len)
    throw DataError("decoder_forward: length " + std::to_string(framed.size()) +
                    " exceeds max_len " + std::to_string(cfg.max_len));
  detail::check_tokens(framed, cfg, "decoder_forward");
  const auto n = static_cast<Eigen::Index>(framed.size());
  Matrix x(n, cfg.d_model);
  std::vector<bool> mask(framed.size());
  bool any_pad = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    x.row(i) = p.token_embedding.row(framed[static_cast<std::size_t>(i)]) + p.position_embedding.row(i);
    mask[static_cast<std::size_t>(i)] = framed[static_cast<std::size_t>(i)] == reserved::kPad;
    any_pad |= mask[static_cast<std::size_t>(i)];
  }
  const std::vector<bool>* key_mask = any_pad ? &mask : nullptr;
  if (cache) {
    cache->tokens.assign(framed.begin(), framed.end());
    cache->key_mask = mask;
    cache->layers.assign(p.decoder.size(), {});
  }
  DecoderLayerCache scratch;
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const auto& layer = p.decoder[l];
    auto& c = cache ? cache->layers[l] : scratch;
    c.input = x;
    Matrix a = nn::forward(layer.self_attn, x, x, key_mask, c.self_attn);
    c.after_self = nn::forward(layer.self_norm, Matrix(x + a), c.norm1);
    Matrix ca = nn::forward(layer.cross_attn, c.after_self, encoder_states, nullptr, c.cross_attn);
    c.after_cross = nn::forward(layer.cross_norm, Matrix(c.after_self + ca), c.norm2);
    Matrix f = nn::forward(layer.ffn, c.after_cross, c.ffn);
    x = nn::forward(layer.ffn_norm, Matrix(c.after_cross + f), c.norm3);
  }
  return x;
}

/// Slot inputs concat(h_i, h_{i+1}), one row per adjacent pair.
inline Matrix slot_features(const Matrix& hidden) {
  const Eigen::Index slots = hidden.rows() - 1, d = hidden.cols();
  Matrix f(slots, 2 * d);
  f.leftCols(d) = hidden.topRows(slots);
  f.rightCols(d) = hidden.bottomRows(slots);
  return f;
}

/// (len-1) × (K_max+1) logits over placeholder counts per slot.
inline Matrix placeholder_logits(const Matrix& hidden, const ModelParams& p) {
  if (hidden.rows() < 2) throw DataError("placeholder_logits: need at least two positions");
  return nn::forward(p.placeholder_head, slot_features(hidden));
}

inline std::vector<std::size_t> placeholder_positions(std::span<const TokenId> framed) {
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < framed.size(); ++i)
    if (framed[i] == reserved::kPlh) pos.push_back(i);
  return pos;
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

/// One vocab-sized logit row per [PLH] of `framed`, left to right.
inline Matrix token_logits(const Matrix& hidden, std::span<const TokenId> framed,
                           const ModelParams& p) {
  auto pos = placeholder_positions(framed);
  return nn::forward(p.token_head, gather_rows(hidden, pos));
}

/// (len-2) × 2 keep/delete logits for every non-boundary position.
inline Matrix deletion_logits(const Matrix& hidden, const ModelParams& p) {
  if (hidden.rows() < 2) throw DataError("deletion_logits: need at least two positions");
  return nn::forward(p.deletion_head, Matrix(hidden.middleRows(1, hidden.rows() - 2)));
}

// ---------------------------------------------------------------------------
// Loss and gradients

struct LossBreakdown {
  double placeholder = 0.0;
  double token = 0.0;
  double deletion = 0.0;
  std::size_t placeholder_slots = 0;
  std::size_t token_slots = 0;
  std::size_t deletion_slots = 0;
  double total() const { return placeholder + token + deletion; }
};

/// Alignment labels the model sees for an example: the stored labels with
/// alignment prompting, zeros without.
inline AlignmentLabels model_labels(const TrainingExample& ex, bool use_alignment) {
  if (use_alignment && ex.alignment_labels.size() == ex.source.size()) return ex.alignment_labels;
  return AlignmentLabels(ex.source.size(), 0);
}

namespace detail {

/// Sum of row-wise cross-entropies; writes d(loss)/d(logits) when asked.
inline double cross_entropy_rows(const Matrix& logits, std::span<const int> targets,
                                 Matrix* dlogits) {
  double loss = 0.0;
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= logits.cols()) throw DataError("label outside classifier support");
    double mx = logits.row(r).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(r).array() - mx).exp().matrix();
    double total = e.sum();
    loss += std::log(total) + mx - logits(r, t);
    if (dlogits) {
      dlogits->row(r) = e / total;
      (*dlogits)(r, t) -= 1.0;
    }
  }
  return loss;
}

inline void encoder_backward(const EncoderCache& cache, const Matrix& dout, const ModelParams& p,
                             ModelParams& g) {
  Matrix dx = dout;
  for (std::size_t l = p.encoder.size(); l-- > 0;) {
    const auto& layer = p.encoder[l];
    auto& gl = g.encoder[l];
    const auto& c = cache.layers[l];
    Matrix dsum2 = Matrix::Zero(dx.rows(), dx.cols());
    nn::backward(layer.ffn_norm, c.norm2, dx, gl.ffn_norm, dsum2);
    Matrix dmid = dsum2;
    nn::backward(layer.ffn, c.mid, c.ffn, dsum2, gl.ffn, dmid);
    Matrix dsum1 = Matrix::Zero(dx.rows(), dx.cols());
    nn::backward(layer.attn_norm, c.norm1, dmid, gl.attn_norm, dsum1);
    Matrix din = dsum1;
    nn::backward(layer.self_attn, c.input, c.input, c.attn, dsum1, gl.self_attn, din, din);
    dx = std::move(din);
  }
  for (std::size_t i = 0; i < cache.tokens.size(); ++i) {
    auto r = static_cast<Eigen::Index>(i);
    g.token_embedding.row(cache.tokens[i]) += dx.row(r);
    g.position_embedding.row(r) += dx.row(r);
    if (cache.labels[i] != 0) g.alignment_embedding.row(cache.labels[i]) += dx.row(r);
  }
}

inline void decoder_backward(const DecoderCache& cache, const Matrix& encoder_states,
                             const Matrix& dout, const ModelParams& p, ModelParams& g,
                             Matrix& dencoder) {
  // Key masking needs no special handling here: masked probabilities are zero.
  Matrix dx = dout;
  for (std::size_t l = p.decoder.size(); l-- > 0;) {
    const auto& layer = p.decoder[l];
    auto& gl = g.decoder[l];
    const auto& c = cache.layers[l];
    Matrix dsum3 = Matrix::Zero(dx.rows(), dx.cols());
    nn::backward(layer.ffn_norm, c.norm3, dx, gl.ffn_norm, dsum3);
    Matrix dcross_out = dsum3;
    nn::backward(layer.ffn, c.after_cross, c.ffn, dsum3, gl.ffn, dcross_out);
    Matrix dsum2 = Matrix::Zero(dx.rows(), dx.cols());
    nn::backward(layer.cross_norm, c.norm2, dcross_out, gl.cross_norm, dsum2);
    Matrix dself_out = dsum2;
    nn::backward(layer.cross_attn, c.after_self, encoder_states, c.cross_attn, dsum2,
                 gl.cross_attn, dself_out, dencoder);
    Matrix dsum1 = Matrix::Zero(dx.rows(), dx.cols());
    nn::backward(layer.self_norm, c.norm1, dself_out, gl.self_norm, dsum1);
    Matrix din = dsum1;
    nn::backward(layer.self_attn, c.input, c.input, c.self_attn, dsum1, gl.self_attn, din, din);
    dx = std::move(din);
  }
  for (std::size_t i = 0; i < cache.tokens.size(); ++i) {
    auto r = static_cast<Eigen::Index>(i);
    g.token_embedding.row(cache.tokens[i]) += dx.row(r);
    g.position_embedding.row(r) += dx.row(r);
  }
}

/// Forward (and optionally backward) over the three imitation sub-tasks.
inline double run_example(const TrainingExample& ex, const ModelParams& p, const ModelConfig& cfg,
                          bool use_alignment, ModelParams* grad, LossBreakdown* parts) {
  const bool want_grad = grad != nullptr;
  AlignmentLabels labels = model_labels(ex, use_alignment);
  EncoderCache enc_cache;
  Matrix enc = encode(ex.source, labels, p, cfg, nullptr, want_grad ? &enc_cache : nullptr);
  Matrix denc;
  if (want_grad) denc = Matrix::Zero(enc.rows(), enc.cols());
  LossBreakdown lb;

  // Placeholder classifier on the fragment.
  Sentence framed_fragment = frame(ex.fragment);
  if (ex.placeholder_counts.size() + 1 != framed_fragment.size())
    throw DataError("training example: placeholder counts do not match fragment slots");
  for (int c : ex.placeholder_counts)
    if (c > cfg.k_max)
      throw KmaxOverflow("training example: placeholder count " + std::to_string(c) +
                         " exceeds K_max=" + std::to_string(cfg.k_max));
  {
    DecoderCache dc;
    Matrix h = decoder_forward(enc, framed_fragment, p, cfg, want_grad ? &dc : nullptr);
    Matrix feats = slot_features(h);
    Matrix logits = nn::forward(p.placeholder_head, feats);
    Matrix dlogits;
    lb.placeholder = cross_entropy_rows(logits, ex.placeholder_counts, want_grad ? &dlogits : nullptr);
    lb.placeholder_slots = ex.placeholder_counts.size();
    if (want_grad) {
      Matrix dfeats = Matrix::Zero(feats.rows(), feats.cols());
      nn::backward(p.placeholder_head, feats, dlogits, grad->placeholder_head, dfeats);
      const Eigen::Index d = h.cols(), slots = feats.rows();
      Matrix dh = Matrix::Zero(h.rows(), d);
      dh.topRows(slots) += dfeats.leftCols(d);
      dh.bottomRows(slots) += dfeats.rightCols(d);
      decoder_backward(dc, enc, dh, p, *grad, denc);
    }
  }

  // Token classifier on the placeholder-expanded fragment.
  if (!ex.token_fills.empty()) {
    Sentence expanded = insert_placeholders(framed_fragment, ex.placeholder_counts);
    DecoderCache dc;
    Matrix h = decoder_forward(enc, expanded, p, cfg, want_grad ? &dc : nullptr);
    auto pos = placeholder_positions(expanded);
    if (pos.size() != ex.token_fills.size())
      throw DataError("training example: fill count does not match placeholders");
    Matrix rows = gather_rows(h, pos);
    Matrix logits = nn::forward(p.token_head, rows);
    std::vector<int> targets(ex.token_fills.begin(), ex.token_fills.end());
    Matrix dlogits;
    lb.token = cross_entropy_rows(logits, targets, want_grad ? &dlogits : nullptr);
    lb.token_slots = targets.size();
    if (want_grad) {
      Matrix drows = Matrix::Zero(rows.rows(), rows.cols());
      nn::backward(p.token_head, rows, dlogits, grad->token_head, drows);
      Matrix dh = Matrix::Zero(h.rows(), h.cols());
      for (std::size_t i = 0; i < pos.size(); ++i)
        dh.row(static_cast<Eigen::Index>(pos[i])) += drows.row(static_cast<Eigen::Index>(i));
      decoder_backward(dc, enc, dh, p, *grad, denc);
    }
  }

  // Deletion classifier on the noised candidate.
  if (!ex.candidate.empty()) {
    if (ex.deletion_labels.size() != ex.candidate.size())
      throw DataError("training example: deletion labels do not match candidate");
    Sentence framed_candidate = frame(ex.candidate);
    DecoderCache dc;
    Matrix h = decoder_forward(enc, framed_candidate, p, cfg, want_grad ? &dc : nullptr);
    Matrix inner = h.middleRows(1, h.rows() - 2);
    Matrix logits = nn::forward(p.deletion_head, inner);
    std::vector<int> targets;
    for (auto l : ex.deletion_labels) targets.push_back(static_cast<int>(l));
    Matrix dlogits;
    lb.deletion = cross_entropy_rows(logits, targets, want_grad ? &dlogits : nullptr);
    lb.deletion_slots = targets.size();
    if (want_grad) {
      Matrix dinner = Matrix::Zero(inner.rows(), inner.cols());
      nn::backward(p.deletion_head, inner, dlogits, grad->deletion_head, dinner);
      Matrix dh = Matrix::Zero(h.rows(), h.cols());
      dh.middleRows(1, h.rows() - 2) = dinner;
      decoder_backward(dc, enc, dh, p, *grad, denc);
    }
  }

  if (want_grad) encoder_backward(enc_cache, denc, p, *grad);
  if (parts) *parts = lb;
  return lb.total();
}

}  // namespace detail

/// Sum of the placeholder, token and deletion cross-entropies of one example.
inline double loss(const TrainingExample& ex, const ModelParams& p, const ModelConfig& cfg,
                   bool use_alignment = true, LossBreakdown* parts = nullptr) {
  return detail::run_example(ex, p, cfg, use_alignment, nullptr, parts);
}

/// Accumulates d(loss)/d(params) into `grad` (shaped like `p`); returns the loss.
/// Alignment-embedding row 0 is a constant and never receives gradient.
inline double gradients(const TrainingExample& ex, const ModelParams& p, const ModelConfig& cfg,
                        ModelParams& grad, bool use_alignment = true,
                        LossBreakdown* parts = nullptr) {
  return detail::run_example(ex, p, cfg, use_alignment, &grad, parts);
}

// ---------------------------------------------------------------------------
// Checkpoints: "ACTM", u32 version, config fields (LE u32/f64), then every
// tensor in declaration order as LE f32.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  put_u32(out, static_cast<std::uint32_t>(bits));
  put_u32(out, static_cast<std::uint32_t>(bits >> 32));
}
inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  std::uint32_t u32() {
    if (pos + 4 > buf.size()) throw DataError("checkpoint truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  double f64() {
    std::uint64_t lo = u32(), hi = u32();
    return std::bit_cast<double>(lo | (hi << 32));
  }
  float f32() { return std::bit_cast<float>(u32()); }
};
}  // namespace detail

inline std::string serialize_checkpoint(const ModelConfig& cfg, const ModelParams& p) {
  std::string out = "ACTM";
  detail::put_u32(out, kCheckpointVersion);
  for (int v : {cfg.d_model, cfg.n_layers, cfg.d_ff, cfg.k_max, cfg.max_len, cfg.vocab_size,
                cfg.n_constraint_labels})
    detail::put_u32(out, static_cast<std::uint32_t>(v));
  detail::put_f64(out, cfg.learning_rate);
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.seed));
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.seed >> 32));
  for_each_tensor(p, [&](const std::string&, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f32(out, static_cast<float>(m.data()[i]));
  });
  return out;
}

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

inline Checkpoint deserialize_checkpoint(const std::string& buf) {
  if (buf.size() < 8 || buf.compare(0, 4, "ACTM") != 0) throw DataError("not an ACTM checkpoint");
  detail::Reader rd{buf, 4};
  if (auto v = rd.u32(); v != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(v));
  Checkpoint ck;
  auto& c = ck.config;
  c.d_model = static_cast<int>(rd.u32());
  c.n_layers = static_cast<int>(rd.u32());
  c.d_ff = static_cast<int>(rd.u32());
  c.k_max = static_cast<int>(rd.u32());
  c.max_len = static_cast<int>(rd.u32());
  c.vocab_size = static_cast<int>(rd.u32());
  c.n_constraint_labels = static_cast<int>(rd.u32());
  c.learning_rate = rd.f64();
  std::uint64_t lo = rd.u32(), hi = rd.u32();
  c.seed = lo | (hi << 32);
  c.validate();
  ck.params = init_params(c);
  for_each_tensor(ck.params, [&](const std::string&, Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rd.f32();
  });
  if (rd.pos != buf.size()) throw DataError("checkpoint has trailing bytes");
  return ck;
}

/// Writes via a temporary file and rename.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& p) {
  write_file_atomic(path, serialize_checkpoint(cfg, p));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace act
