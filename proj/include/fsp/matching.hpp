#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fsp/error.hpp"
#include "fsp/rgbd.hpp"

namespace fsp {

/// <P(i), Q(j)> / temperature.
inline Eigen::MatrixXd score_matrix(const FeatureCloud& prototypes, const FeatureCloud& queries,
                                    double temperature = 0.1) {
  if (prototypes.dim() != queries.dim())
    throw Error(Errc::DimensionMismatch, "descriptor dimensions differ");
  if (!(temperature > 0.0)) throw Error(Errc::InvalidParams, "temperature must be positive");
  return (prototypes.descriptors * queries.descriptors.transpose()) / temperature;
}

struct SinkhornParams {
  int iterations = 50;
  bool use_dustbin = true;
  double dustbin_score = 0.0;
  /// Anderson acceleration depth on the column potentials; 0 = plain
  /// alternating updates. Same fixed point either way.
  int anderson_memory = 5;
};

struct Assignment {
  Eigen::MatrixXd prob;
  bool has_dustbin = false;

  Eigen::Index real_rows() const { return prob.rows() - (has_dustbin ? 1 : 0); }
  Eigen::Index real_cols() const { return prob.cols() - (has_dustbin ? 1 : 0); }

  Eigen::VectorXd target_row_sums() const {
    const Eigen::Index m = real_rows(), n = real_cols();
    Eigen::VectorXd a = Eigen::VectorXd::Ones(prob.rows());
    if (has_dustbin) a[m] = static_cast<double>(n);
    return a;
  }
  Eigen::VectorXd target_col_sums() const {
    const Eigen::Index m = real_rows(), n = real_cols();
    Eigen::VectorXd b = Eigen::VectorXd::Constant(prob.cols(), has_dustbin ? 1.0 : double(m) / double(n));
    if (has_dustbin) b[n] = static_cast<double>(m);
    return b;
  }
};

namespace detail {

inline double logsumexp(const Eigen::Ref<const Eigen::VectorXd>& x) {
  const double mx = x.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((x.array() - mx).exp().sum());
}

/// log(sum_j exp(z(i,j) + p_j)) for every row i of z, with z given as
/// k = exp(z - shift) per row. Rows whose product underflows are redone
/// exactly from z.
inline void log_matvec(const Eigen::MatrixXd& k, const Eigen::VectorXd& shift, const Eigen::MatrixXd& z_rows,
                       const Eigen::VectorXd& p, Eigen::VectorXd& out) {
  const double mp = p.maxCoeff();
  const Eigen::VectorXd ep = (p.array() - mp).exp().matrix();
  const Eigen::VectorXd s = k * ep;
  out.resize(k.rows());
  for (Eigen::Index i = 0; i < k.rows(); ++i) {
    if (s[i] > 1e-280 && std::isfinite(s[i]))
      out[i] = shift[i] + mp + std::log(s[i]);
    else
      out[i] = logsumexp(z_rows.row(i).transpose() + p);
  }
}

/// Anderson mixing over a sliding window of (g, g - x) pairs.
class Anderson {
 public:
  explicit Anderson(int memory) : memory_(memory) {}

  Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& g) {
    if (memory_ <= 0) return g;
    gs_.push_back(g);
    fs_.push_back(g - x);
    if (static_cast<int>(gs_.size()) > memory_ + 1) {
      gs_.erase(gs_.begin());
      fs_.erase(fs_.begin());
    }
    const auto h = static_cast<Eigen::Index>(gs_.size()) - 1;
    if (h == 0) return g;
    Eigen::MatrixXd df(g.size(), h), dg(g.size(), h);
    for (Eigen::Index c = 0; c < h; ++c) {
      df.col(c) = fs_[static_cast<std::size_t>(c + 1)] - fs_[static_cast<std::size_t>(c)];
      dg.col(c) = gs_[static_cast<std::size_t>(c + 1)] - gs_[static_cast<std::size_t>(c)];
    }
    Eigen::MatrixXd a = df.transpose() * df;
    a.diagonal().array() += 1e-10 * a.trace() / static_cast<double>(h) + 1e-300;
    const Eigen::VectorXd gamma = a.ldlt().solve(df.transpose() * fs_.back());
    Eigen::VectorXd next = g - dg * gamma;
    if (!next.allFinite()) {
      gs_.clear();
      fs_.clear();
      return g;
    }
    return next;
  }

 private:
  int memory_;
  std::vector<Eigen::VectorXd> gs_, fs_;
};

}  // namespace detail

/// Log-domain Sinkhorn: alternating row and column log-normalizations of
/// the potentials u, v with P = exp(z + u 1ᵀ + 1 vᵀ). The log-sum-exps are
/// evaluated as products with exp(z - row max) and exp(z - column max),
/// which is exact up to rounding and avoids per-entry exponentials. The
/// last update is a column update, so column marginals hold to rounding.
inline Assignment sinkhorn(const Eigen::MatrixXd& scores, const SinkhornParams& params = {}) {
  if (params.iterations < 1) throw Error(Errc::InvalidParams, "iterations must be >= 1");
  if (params.anderson_memory < 0) throw Error(Errc::InvalidParams, "anderson_memory must be >= 0");
  if (scores.rows() == 0 || scores.cols() == 0) throw Error(Errc::ShapeMismatch, "empty score matrix");
  if (!scores.allFinite() || !std::isfinite(params.dustbin_score))
    throw Error(Errc::NonFiniteScores, "score matrix has non-finite entries");

  const Eigen::Index m = scores.rows(), n = scores.cols();
  Assignment out;
  out.has_dustbin = params.use_dustbin;
  Eigen::MatrixXd z;
  if (params.use_dustbin) {
    z = Eigen::MatrixXd::Constant(m + 1, n + 1, params.dustbin_score);
    z.topLeftCorner(m, n) = scores;
  } else {
    z = scores;
  }
  out.prob.resize(z.rows(), z.cols());
  const Eigen::VectorXd log_a = out.target_row_sums().array().log();
  const Eigen::VectorXd log_b = out.target_col_sums().array().log();

  const Eigen::MatrixXd zt = z.transpose();
  const Eigen::VectorXd row_max = z.rowwise().maxCoeff();
  const Eigen::VectorXd col_max = z.colwise().maxCoeff().transpose();
  const Eigen::MatrixXd k_rows = (z.colwise() - row_max).array().exp().matrix();
  const Eigen::MatrixXd k_cols = (zt.colwise() - col_max).array().exp().matrix();

  Eigen::VectorXd u = Eigen::VectorXd::Zero(z.rows());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(z.cols());
  Eigen::VectorXd lse;
  const auto sweep = [&](const Eigen::VectorXd& v_in) {
    detail::log_matvec(k_rows, row_max, z, v_in, lse);
    u = log_a - lse;
    detail::log_matvec(k_cols, col_max, zt, u, lse);
    return Eigen::VectorXd(log_b - lse);
  };
  detail::Anderson accel(params.anderson_memory);
  for (int it = 0; it + 1 < params.iterations; ++it) v = accel.step(v, sweep(v));
  v = sweep(v);  // plain final sweep keeps u and v consistent

  out.prob = ((z.colwise() + u).rowwise() + v.transpose()).array().exp().matrix();
  return out;
}

struct Match {
  std::size_t prototype = 0;
  std::size_t query = 0;
  double confidence = 0.0;
  bool operator==(const Match&) const = default;
};

using MatchSet = std::vector<Match>;

/// Mutual argmax over the real block (dustbin excluded, ties to the lowest
/// index) with assignment value >= threshold.
inline MatchSet extract_matches(const Assignment& a, double confidence_threshold = 0.2) {
  const Eigen::Index m = a.real_rows(), n = a.real_cols();
  MatchSet out;
  if (m <= 0 || n <= 0) return out;
  const auto block = a.prob.topLeftCorner(m, n);
  std::vector<Eigen::Index> col_best(static_cast<std::size_t>(n), 0);
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < m; ++i)
      if (block(i, j) > block(arg, j)) arg = i;
    col_best[static_cast<std::size_t>(j)] = arg;
  }
  for (Eigen::Index i = 0; i < m; ++i) {
    Eigen::Index arg = 0;
    for (Eigen::Index j = 1; j < n; ++j)
      if (block(i, j) > block(i, arg)) arg = j;
    const double value = block(i, arg);
    if (col_best[static_cast<std::size_t>(arg)] == i && value >= confidence_threshold)
      out.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(arg), std::clamp(value, 0.0, 1.0)});
  }
  return out;
}

struct NllResult {
  double value = 0.0;
  bool clamped = false;  ///< some ground-truth cell was below 1e-12
};

/// -(1/|gt|) sum log(prob[i][j]), probabilities clamped at 1e-12.
inline NllResult matching_nll_loss(const Assignment& a,
                                   std::span<const std::pair<std::size_t, std::size_t>> gt_pairs) {
  NllResult r;
  if (gt_pairs.empty()) return r;
  constexpr double kFloor = 1e-12;
  double sum = 0.0;
  for (const auto& [i, j] : gt_pairs) {
    if (i >= static_cast<std::size_t>(a.prob.rows()) || j >= static_cast<std::size_t>(a.prob.cols()))
      throw Error(Errc::IndexOutOfRange, "ground-truth pair outside the assignment matrix");
    double p = a.prob(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    if (p < kFloor) {
      p = kFloor;
      r.clamped = true;
    }
    sum -= std::log(p);
  }
  r.value = sum / static_cast<double>(gt_pairs.size());
  return r;
}

}  // namespace fsp
