#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "fsp/error.hpp"
#include "fsp/random.hpp"
#include "fsp/rgbd.hpp"

namespace fsp {

/// N x d, one token per row.
using TokenMatrix = Eigen::MatrixXd;

namespace detail {

inline void check_qkv(const TokenMatrix& q, const TokenMatrix& k, const TokenMatrix& v) {
  if (k.rows() != v.rows()) throw Error(Errc::ShapeMismatch, "key and value row counts differ");
  if (q.cols() != k.cols()) throw Error(Errc::ShapeMismatch, "query and key widths differ");
  if (k.rows() == 0) throw Error(Errc::ShapeMismatch, "attention over zero keys");
}

inline double elu_plus_one(double x) { return x > 0.0 ? x + 1.0 : std::exp(x); }

}  // namespace detail

/// softmax(q kᵀ) v with a row-max shift before exponentiation.
inline TokenMatrix softmax_attention(const TokenMatrix& q, const TokenMatrix& k, const TokenMatrix& v) {
  detail::check_qkv(q, k, v);
  Eigen::MatrixXd logits = q * k.transpose();
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - mx).exp().matrix();
    logits.row(i) /= logits.row(i).sum();
  }
  return logits * v;
}

/// Feature map phi(x) = elu(x) + 1, elementwise.
inline Eigen::MatrixXd phi(const Eigen::MatrixXd& x) { return x.unaryExpr(&detail::elu_plus_one); }

/// Normalized linear attention:
///   out_i = phi(q_i) (sum_j phi(k_j) v_jᵀ) / (phi(q_i) · sum_j phi(k_j)),
/// evaluated right-to-left so the cost is O(N d²).
inline TokenMatrix linear_attention(const TokenMatrix& q, const TokenMatrix& k, const TokenMatrix& v) {
  detail::check_qkv(q, k, v);
  // One key: every weight is s / s = 1. The factored form would only
  // reproduce v up to rounding.
  if (k.rows() == 1) return v.replicate(q.rows(), 1);
  const Eigen::MatrixXd fq = phi(q);
  const Eigen::MatrixXd fk = phi(k);
  const Eigen::MatrixXd kv = fk.transpose() * v;           // d x dv
  const Eigen::VectorXd ksum = fk.colwise().sum().transpose();  // d
  const Eigen::VectorXd denom = fq * ksum;                 // N
  TokenMatrix out = fq * kv;
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) /= denom[i];
  return out;
}

/// Query/key/value/output projections of one residual attention block.
/// Tokens are rows, so a projection is applied as tokens * W.
struct BlockWeights {
  Eigen::MatrixXd wq, wk, wv, wo;

  static BlockWeights zeros(Eigen::Index d) {
    const Eigen::MatrixXd z = Eigen::MatrixXd::Zero(d, d);
    return {z, z, z, z};
  }

  Eigen::Index dim() const { return wq.rows(); }

  void check(Eigen::Index d) const {
    for (const auto* m : {&wq, &wk, &wv, &wo})
      if (m->rows() != d || m->cols() != d)
        throw Error(Errc::ShapeMismatch, "projection is not " + std::to_string(d) + "x" + std::to_string(d));
  }

  bool operator==(const BlockWeights& o) const {
    return wq == o.wq && wk == o.wk && wv == o.wv && wo == o.wo;
  }
};

/// tokens + (linear_attention(t Wq, t Wk, t Wv)) Wo
inline TokenMatrix self_attention_block(const TokenMatrix& tokens, const BlockWeights& w) {
  w.check(tokens.cols());
  return tokens + linear_attention(tokens * w.wq, tokens * w.wk, tokens * w.wv) * w.wo;
}

/// target + (linear_attention(target Wq, context Wk, context Wv)) Wo
inline TokenMatrix cross_attention_block(const TokenMatrix& target, const TokenMatrix& context,
                                         const BlockWeights& w) {
  w.check(target.cols());
  if (context.cols() != target.cols()) throw Error(Errc::ShapeMismatch, "context width differs");
  return target + linear_attention(target * w.wq, context * w.wk, context * w.wv) * w.wo;
}

/// Parameters of the self -> cross -> self enhancement stack.
struct AttentionWeights {
  static constexpr int kVersion = 1;
  static constexpr std::array<const char*, 6> kBlockNames = {
      "support_self", "query_self", "support_to_query", "query_to_support", "support_self_post",
      "query_self_post"};

  Eigen::Index descriptor_dim = kDescriptorDim;
  std::uint64_t seed = 0;
  BlockWeights support_self, query_self;
  BlockWeights support_to_query;  ///< query tokens attend to prototypes
  BlockWeights query_to_support;  ///< prototypes attend to query tokens
  BlockWeights support_self_post, query_self_post;

  std::array<BlockWeights*, 6> blocks() {
    return {&support_self, &query_self, &support_to_query, &query_to_support, &support_self_post,
            &query_self_post};
  }
  std::array<const BlockWeights*, 6> blocks() const {
    return {&support_self, &query_self, &support_to_query, &query_to_support, &support_self_post,
            &query_self_post};
  }

  static AttentionWeights zeros(Eigen::Index d = kDescriptorDim) {
    AttentionWeights w;
    w.descriptor_dim = d;
    for (auto* b : w.blocks()) *b = BlockWeights::zeros(d);
    return w;
  }

  /// Gaussian entries, sigma = gain / sqrt(d), from a fixed seed.
  static AttentionWeights random(std::uint64_t seed, Eigen::Index d = kDescriptorDim, double gain = 1.0) {
    AttentionWeights w = zeros(d);
    w.seed = seed;
    Rng rng(splitmix64(seed));
    const double sigma = gain / std::sqrt(static_cast<double>(d));
    for (auto* b : w.blocks())
      for (auto* m : {&b->wq, &b->wk, &b->wv, &b->wo})
        for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = sigma * normal01(rng);
    return w;
  }

  /// Exchanges the support-side and query-side blocks.
  AttentionWeights mirrored() const {
    AttentionWeights m = *this;
    std::swap(m.support_self, m.query_self);
    std::swap(m.support_to_query, m.query_to_support);
    std::swap(m.support_self_post, m.query_self_post);
    return m;
  }

  bool operator==(const AttentionWeights& o) const {
    if (descriptor_dim != o.descriptor_dim || seed != o.seed) return false;
    const auto a = blocks(), b = o.blocks();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!(*a[i] == *b[i])) return false;
    return true;
  }
};

struct EnhancedPair {
  FeatureCloud prototypes;
  FeatureCloud query_features;
};

inline void normalize_rows(Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n > 0.0) m.row(i) /= n;
  }
}

/// Self-attention on each side, simultaneous bidirectional cross-attention,
/// a second self-attention on each side, then row L2 normalization.
/// Points and pixel provenance are copied through untouched.
inline EnhancedPair enhance(const FeatureCloud& support, const FeatureCloud& query,
                            const AttentionWeights& w) {
  if (support.size() == 0 || query.size() == 0) throw Error(Errc::EmptyCloud, "empty feature cloud");
  support.validate();
  query.validate();
  if (support.dim() != query.dim() || support.dim() != w.descriptor_dim)
    throw Error(Errc::ShapeMismatch, "descriptor dimension mismatch");

  const TokenMatrix s1 = self_attention_block(support.descriptors, w.support_self);
  const TokenMatrix q1 = self_attention_block(query.descriptors, w.query_self);
  const TokenMatrix q2 = cross_attention_block(q1, s1, w.support_to_query);
  const TokenMatrix s2 = cross_attention_block(s1, q1, w.query_to_support);

  EnhancedPair out{support, query};
  out.prototypes.descriptors = self_attention_block(s2, w.support_self_post);
  out.query_features.descriptors = self_attention_block(q2, w.query_self_post);
  normalize_rows(out.prototypes.descriptors);
  normalize_rows(out.query_features.descriptors);
  return out;
}

}  // namespace fsp
