#pragma once

// Dense layers with explicit forward caches and analytic backward passes.
//
// Sequences are row-major matrices, one row per position. Every backward
// function accumulates (+=) into the gradient and input-gradient arguments.

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

namespace act::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// y = x W + b with W of shape in × out and b of shape 1 × out.
struct Linear {
  Matrix weight;
  Matrix bias;
};

inline Matrix forward(const Linear& l, const Matrix& x) {
  Matrix y = x * l.weight;
  y.rowwise() += l.bias.row(0);
  return y;
}

inline void backward(const Linear& l, const Matrix& x, const Matrix& dy, Linear& grad,
                     Matrix& dx) {
  grad.weight.noalias() += x.transpose() * dy;
  grad.bias += dy.colwise().sum();
  dx.noalias() += dy * l.weight.transpose();
}

struct LayerNorm {
  Matrix gain;  // 1 × d
  Matrix bias;  // 1 × d
};

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Matrix normalized;
  Eigen::VectorXd inv_std;
};

inline Matrix forward(const LayerNorm& ln, const Matrix& x, LayerNormCache& cache) {
  const auto d = static_cast<double>(x.cols());
  cache.normalized.resize(x.rows(), x.cols());
  cache.inv_std.resize(x.rows());
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mean = x.row(r).sum() / d;
    double var = (x.row(r).array() - mean).square().sum() / d;
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(r) = inv;
    cache.normalized.row(r) = (x.row(r).array() - mean) * inv;
    y.row(r) = cache.normalized.row(r).cwiseProduct(ln.gain.row(0)) + ln.bias.row(0);
  }
  return y;
}

inline void backward(const LayerNorm& ln, const LayerNormCache& cache, const Matrix& dy,
                     LayerNorm& grad, Matrix& dx) {
  const auto d = static_cast<double>(dy.cols());
  grad.gain += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
  grad.bias += dy.colwise().sum();
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    Eigen::RowVectorXd dn = dy.row(r).cwiseProduct(ln.gain.row(0));
    double mean_dn = dn.sum() / d;
    double mean_dn_n = dn.dot(cache.normalized.row(r)) / d;
    dx.row(r) += cache.inv_std(r) *
                 (dn.array() - mean_dn - cache.normalized.row(r).array() * mean_dn_n).matrix();
  }
}

/// Row-wise softmax; entries where `mask[c]` is true get probability 0.
inline Matrix softmax_rows(const Matrix& logits, const std::vector<bool>* mask = nullptr) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < logits.cols(); ++c)
      if (!mask || !(*mask)[static_cast<std::size_t>(c)]) mx = std::max(mx, logits(r, c));
    double total = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      double e = (mask && (*mask)[static_cast<std::size_t>(c)]) ? 0.0 : std::exp(logits(r, c) - mx);
      p(r, c) = e;
      total += e;
    }
    p.row(r) /= total;
  }
  return p;
}

/// Single-head scaled dot-product attention with input/output projections.
struct Attention {
  Linear query, key, value, output;
};

struct AttentionCache {
  Matrix q, k, v, probs, context;
};

/// `key_mask[j]` true excludes memory row j from every query.
inline Matrix forward(const Attention& a, const Matrix& xq, const Matrix& xm,
                      const std::vector<bool>* key_mask, AttentionCache& cache) {
  cache.q = forward(a.query, xq);
  cache.k = forward(a.key, xm);
  cache.v = forward(a.value, xm);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cache.q.cols()));
  Matrix scores = (cache.q * cache.k.transpose()) * scale;
  cache.probs = softmax_rows(scores, key_mask);
  cache.context = cache.probs * cache.v;
  return forward(a.output, cache.context);
}

inline void backward(const Attention& a, const Matrix& xq, const Matrix& xm,
                     const AttentionCache& cache, const Matrix& dout, Attention& grad,
                     Matrix& dxq, Matrix& dxm) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(cache.q.cols()));
  Matrix dcontext = Matrix::Zero(cache.context.rows(), cache.context.cols());
  backward(a.output, cache.context, dout, grad.output, dcontext);
  Matrix dprobs = dcontext * cache.v.transpose();
  Matrix dv = cache.probs.transpose() * dcontext;
  Matrix dscores(dprobs.rows(), dprobs.cols());
  for (Eigen::Index r = 0; r < dprobs.rows(); ++r) {
    double dot = dprobs.row(r).dot(cache.probs.row(r));
    dscores.row(r) = cache.probs.row(r).array() * (dprobs.row(r).array() - dot);
  }
  dscores *= scale;
  Matrix dq = dscores * cache.k;
  Matrix dk = dscores.transpose() * cache.q;
  backward(a.query, xq, dq, grad.query, dxq);
  backward(a.key, xm, dk, grad.key, dxm);
  backward(a.value, xm, dv, grad.value, dxm);
}

/// GELU, tanh approximation.
inline double gelu(double z) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * z * (1.0 + std::tanh(c * (z + 0.044715 * z * z * z)));
}

inline double gelu_grad(double z) {
  constexpr double c = 0.7978845608028654;
  double t = std::tanh(c * (z + 0.044715 * z * z * z));
  return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * z * z);
}

struct FeedForward {
  Linear inner, outer;
};

struct FeedForwardCache {
  Matrix pre, act;
};

inline Matrix forward(const FeedForward& f, const Matrix& x, FeedForwardCache& cache) {
  cache.pre = forward(f.inner, x);
  cache.act = cache.pre.unaryExpr([](double z) { return gelu(z); });
  return forward(f.outer, cache.act);
}

inline void backward(const FeedForward& f, const Matrix& x, const FeedForwardCache& cache,
                     const Matrix& dy, FeedForward& grad, Matrix& dx) {
  Matrix dact = Matrix::Zero(cache.act.rows(), cache.act.cols());
  backward(f.outer, cache.act, dy, grad.outer, dact);
  Matrix dpre = dact.cwiseProduct(cache.pre.unaryExpr([](double z) { return gelu_grad(z); }));
  backward(f.inner, x, dpre, grad.inner, dx);
}

/// -log softmax(logits)[target]; with `want_grad`, writes
/// softmax(logits) - onehot(target) into `dlogits`.
inline double cross_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& logits, Eigen::Index target,
                            Eigen::Ref<Eigen::RowVectorXd> dlogits, bool want_grad) {
  double mx = logits.maxCoeff();
  Eigen::RowVectorXd e = (logits.array() - mx).exp().matrix();
  double total = e.sum();
  double loss = std::log(total) + mx - logits(target);
  if (want_grad) {
    dlogits = e / total;
    dlogits(target) -= 1.0;
  }
  return loss;
}

}  // namespace act::nn
