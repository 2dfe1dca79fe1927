#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "fsp/error.hpp"
#include "fsp/kdtree.hpp"
#include "fsp/random.hpp"

namespace fsp {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// ---------------------------------------------------------------------------
// Quaternion: scalar-first (w, x, y, z), Hamilton convention.
// ---------------------------------------------------------------------------
struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  static Quaternion identity() { return {}; }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quaternion normalized() const {
    const double n = norm();
    return {w / n, x / n, y / n, z / n};
  }

  Quaternion operator-() const { return {-w, -x, -y, -z}; }

  /// Hamilton product.
  Quaternion operator*(const Quaternion& o) const {
    return {w * o.w - x * o.x - y * o.y - z * o.z,
            w * o.x + x * o.w + y * o.z - z * o.y,
            w * o.y - x * o.z + y * o.w + z * o.x,
            w * o.z + x * o.y - y * o.x + z * o.w};
  }

  Eigen::Vector4d coeffs() const { return {w, x, y, z}; }

  Mat3 to_rotation() const {
    return Eigen::Quaterniond(w, x, y, z).normalized().toRotationMatrix();
  }

  static Quaternion from_rotation(const Mat3& r) {
    Eigen::Quaterniond q(r);
    q.normalize();
    return {q.w(), q.x(), q.y(), q.z()};
  }

  static Quaternion from_axis_angle(const Vec3& axis, double angle_rad) {
    const Vec3 a = axis.normalized() * std::sin(angle_rad / 2);
    return {std::cos(angle_rad / 2), a.x(), a.y(), a.z()};
  }
};

// ---------------------------------------------------------------------------
// Pose: object frame -> camera frame, p_cam = R p_obj + t.
// ---------------------------------------------------------------------------
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  Pose inverse() const {
    Pose inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  /// (a * b)(p) = a(b(p)).
  Pose operator*(const Pose& b) const {
    return {rotation * b.rotation, rotation * b.translation + translation};
  }

  Quaternion quaternion() const { return Quaternion::from_rotation(rotation); }

  static Pose from(const Quaternion& q, const Vec3& t) { return {q.to_rotation(), t}; }
};

inline bool is_proper_rotation(const Mat3& r, double tol = 1e-9) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(r.determinant() - 1.0) <= tol;
}

inline Mat3 rot_x(double rad) { return Eigen::AngleAxisd(rad, Vec3::UnitX()).toRotationMatrix(); }
inline Mat3 rot_y(double rad) { return Eigen::AngleAxisd(rad, Vec3::UnitY()).toRotationMatrix(); }
inline Mat3 rot_z(double rad) { return Eigen::AngleAxisd(rad, Vec3::UnitZ()).toRotationMatrix(); }

inline double deg2rad(double d) { return d * 3.14159265358979323846 / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / 3.14159265358979323846; }

/// Geodesic angle between two rotations, in degrees.
inline double rotation_error_deg(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
  return rad2deg(std::acos(c));
}

/// Uniformly distributed rotation (normalized Gaussian quaternion).
inline Quaternion random_quaternion(Rng& rng) {
  Quaternion q{normal01(rng), normal01(rng), normal01(rng), normal01(rng)};
  return q.normalized();
}

// ---------------------------------------------------------------------------
// Point sets
// ---------------------------------------------------------------------------
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> colors;  ///< empty, or one RGB triple in [0,1] per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_colors() const { return !colors.empty(); }

  Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& p : points) c += p;
    return points.empty() ? c : Vec3(c / static_cast<double>(points.size()));
  }
};

struct CorrespondenceSet {
  std::vector<Vec3> source;
  std::vector<Vec3> target;
  std::vector<double> confidence;  ///< optional

  std::size_t size() const { return source.size(); }

  void add(const Vec3& p, const Vec3& q, double conf = 1.0) {
    source.push_back(p);
    target.push_back(q);
    confidence.push_back(conf);
  }

  void validate() const {
    if (source.size() != target.size())
      throw Error(Errc::ShapeMismatch, "source and target lists differ in length");
    if (!confidence.empty() && confidence.size() != source.size())
      throw Error(Errc::ShapeMismatch, "confidence list length differs from pair count");
  }
};

struct AlignmentResult {
  Pose pose;
  std::vector<bool> inlier_mask;
  double residual = 0.0;  ///< mean squared inlier distance, m²

  std::size_t inlier_count() const {
    return static_cast<std::size_t>(std::count(inlier_mask.begin(), inlier_mask.end(), true));
  }
};

inline PointCloud transform_points(const PointCloud& cloud, const Pose& pose) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(pose.apply(p));
  out.colors = cloud.colors;
  return out;
}

// ---------------------------------------------------------------------------
// Closed-form rigid alignment (no scale): minimizes sum |q_i - (R p_i + t)|².
// ---------------------------------------------------------------------------
namespace detail {

template <class SourceAt, class TargetAt>
Pose umeyama_impl(std::size_t n, SourceAt src, TargetAt dst) {
  if (n < 3) throw Error(Errc::InsufficientCorrespondences, "need at least 3 pairs");
  Vec3 mu_p = Vec3::Zero(), mu_q = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mu_p += src(i);
    mu_q += dst(i);
  }
  mu_p /= static_cast<double>(n);
  mu_q /= static_cast<double>(n);

  Mat3 cross = Mat3::Zero();
  Eigen::MatrixX3d centred(static_cast<Eigen::Index>(n), 3);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 dp = src(i) - mu_p;
    cross += (dst(i) - mu_q) * dp.transpose();
    centred.row(static_cast<Eigen::Index>(i)) = dp.transpose();
  }

  const Vec3 sv = Eigen::JacobiSVD<Eigen::MatrixX3d>(centred).singularValues();
  if (!(sv[0] > 0.0) || sv[1] < 1e-9 * sv[0])
    throw Error(Errc::DegenerateConfiguration, "source points are collinear or coincident");

  Eigen::JacobiSVD<Mat3> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  Vec3 d(1.0, 1.0, (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0);

  Pose pose;
  pose.rotation = u * d.asDiagonal() * v.transpose();
  pose.translation = mu_q - pose.rotation * mu_p;
  return pose;
}

}  // namespace detail

inline Pose umeyama_align(const CorrespondenceSet& corr) {
  corr.validate();
  return detail::umeyama_impl(
      corr.size(), [&](std::size_t i) -> const Vec3& { return corr.source[i]; },
      [&](std::size_t i) -> const Vec3& { return corr.target[i]; });
}

/// Alignment restricted to a subset of pair indices.
inline Pose umeyama_align(const CorrespondenceSet& corr, std::span<const std::size_t> subset) {
  corr.validate();
  return detail::umeyama_impl(
      subset.size(), [&](std::size_t i) -> const Vec3& { return corr.source[subset[i]]; },
      [&](std::size_t i) -> const Vec3& { return corr.target[subset[i]]; });
}

// ---------------------------------------------------------------------------
// RANSAC
// ---------------------------------------------------------------------------
struct RansacParams {
  int iterations = 512;
  double inlier_threshold = 0.01;  ///< metres, per-pair Euclidean distance
  int min_inliers = 0;             ///< 0 selects max(10, ceil(10% of pairs))
  std::uint64_t seed = 0;
  int threads = 1;                 ///< result is identical for every value

  std::size_t effective_min_inliers(std::size_t pairs) const {
    if (min_inliers > 0) return static_cast<std::size_t>(min_inliers);
    const auto tenth = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(pairs)));
    return std::max<std::size_t>(10, tenth);
  }
};

namespace detail {

struct Hypothesis {
  std::size_t inliers = 0;
  double sse = std::numeric_limits<double>::infinity();
  std::int64_t iteration = -1;
  Pose pose;

  /// Total order: more inliers, then lower inlier SSE, then earlier iteration.
  bool better_than(const Hypothesis& o) const {
    if (iteration < 0) return false;
    if (o.iteration < 0) return true;
    if (inliers != o.inliers) return inliers > o.inliers;
    if (sse != o.sse) return sse < o.sse;
    return iteration < o.iteration;
  }
};

inline void score_pose(const CorrespondenceSet& corr, const Pose& pose, double threshold,
                       std::size_t& inliers, double& sse) {
  inliers = 0;
  sse = 0.0;
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const double d = (corr.target[i] - pose.apply(corr.source[i])).norm();
    if (d <= threshold) {
      ++inliers;
      sse += d * d;
    }
  }
}

inline Hypothesis ransac_range(const CorrespondenceSet& corr, const RansacParams& params,
                               std::int64_t begin, std::int64_t end) {
  const std::size_t n = corr.size();
  Hypothesis best;
  for (std::int64_t it = begin; it < end; ++it) {
    Rng rng(stream_seed(params.seed, static_cast<std::uint64_t>(it)));
    std::size_t idx[3];
    idx[0] = uniform_index(rng, n);
    idx[1] = uniform_index(rng, n - 1);
    if (idx[1] >= idx[0]) ++idx[1];
    idx[2] = uniform_index(rng, n - 2);
    const std::size_t lo = std::min(idx[0], idx[1]), hi = std::max(idx[0], idx[1]);
    if (idx[2] >= lo) ++idx[2];
    if (idx[2] >= hi) ++idx[2];

    Hypothesis h;
    h.iteration = it;
    try {
      h.pose = umeyama_align(corr, std::span<const std::size_t>(idx, 3));
    } catch (const Error&) {
      continue;  // degenerate minimal sample
    }
    score_pose(corr, h.pose, params.inlier_threshold, h.inliers, h.sse);
    if (h.better_than(best)) best = h;
  }
  return best;
}

}  // namespace detail

/// Robust rigid alignment. Hypothesis k draws its minimal sample from a
/// stream seeded by (seed, k), so the result does not depend on `threads`.
inline AlignmentResult ransac_align(const CorrespondenceSet& corr, const RansacParams& params = {}) {
  corr.validate();
  const std::size_t n = corr.size();
  if (n < 3) throw Error(Errc::InsufficientCorrespondences, "need at least 3 pairs");
  if (params.iterations < 1 || !(params.inlier_threshold > 0.0))
    throw Error(Errc::InvalidParams, "iterations must be >= 1 and threshold > 0");

  const std::int64_t iters = params.iterations;
  const int workers = std::clamp(params.threads, 1, static_cast<int>(std::min<std::int64_t>(iters, 64)));
  detail::Hypothesis best;
  if (workers == 1) {
    best = detail::ransac_range(corr, params, 0, iters);
  } else {
    std::vector<detail::Hypothesis> partial(static_cast<std::size_t>(workers));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      const std::int64_t b = iters * w / workers, e = iters * (w + 1) / workers;
      pool.emplace_back([&, w, b, e] { partial[static_cast<std::size_t>(w)] = detail::ransac_range(corr, params, b, e); });
    }
    for (auto& t : pool) t.join();
    for (const auto& h : partial)
      if (h.better_than(best)) best = h;
  }

  const std::size_t need = params.effective_min_inliers(n);
  if (best.iteration < 0 || best.inliers < need)
    throw Error(Errc::NoConsensus, "best hypothesis has " + std::to_string(best.inliers) +
                                       " inliers, need " + std::to_string(need));

  const auto mask_of = [&](const Pose& pose) {
    std::vector<bool> mask(n);
    for (std::size_t i = 0; i < n; ++i)
      mask[i] = (corr.target[i] - pose.apply(corr.source[i])).norm() <= params.inlier_threshold;
    return mask;
  };

  AlignmentResult result;
  result.pose = best.pose;
  result.inlier_mask = mask_of(best.pose);

  std::vector<std::size_t> inliers;
  for (std::size_t i = 0; i < n; ++i)
    if (result.inlier_mask[i]) inliers.push_back(i);
  try {
    const Pose refit = umeyama_align(corr, inliers);
    auto refit_mask = mask_of(refit);
    if (std::count(refit_mask.begin(), refit_mask.end(), true) >= static_cast<long>(inliers.size())) {
      result.pose = refit;
      result.inlier_mask = std::move(refit_mask);
    }
  } catch (const Error&) {
    // keep the minimal-sample hypothesis
  }

  double sse = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!result.inlier_mask[i]) continue;
    sse += (corr.target[i] - result.pose.apply(corr.source[i])).squaredNorm();
    ++count;
  }
  result.residual = count ? sse / static_cast<double>(count) : 0.0;
  return result;
}

// ---------------------------------------------------------------------------
// ICP
// ---------------------------------------------------------------------------
enum class IcpMetric {
  PointToPoint,  ///< closed-form fit to nearest neighbours
  PointToPlane,  ///< linearized fit to the tangent planes of the nearest neighbours
};

struct IcpParams {
  int max_iterations = 50;
  double convergence_eps = 1e-6;  ///< m², on the mean residual
  double max_corr_dist = 0.05;    ///< metres
  IcpMetric metric = IcpMetric::PointToPoint;
  std::size_t normal_neighbors = 16;  ///< target normals, point-to-plane only
};

struct IcpResult {
  Pose pose;
  double residual = 0.0;          ///< truncated mean squared distance at `pose`
  double initial_residual = 0.0;  ///< same quantity at the initial pose
  int iterations = 0;
};

namespace detail {

/// Smallest-eigenvalue direction of the neighbourhood covariance.
inline Vec3 pca_normal(std::span<const Vec3> points, std::span<const std::size_t> neighbours) {
  Vec3 mu = Vec3::Zero();
  for (auto i : neighbours) mu += points[i];
  mu /= static_cast<double>(neighbours.size());
  Mat3 cov = Mat3::Zero();
  for (auto i : neighbours) {
    const Vec3 d = points[i] - mu;
    cov += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  return eig.eigenvectors().col(0).normalized();
}

struct IcpPair {
  Vec3 p;               ///< source point
  std::size_t target;   ///< nearest target index
};

/// Mean over source points of min(e², gate²), where e is the distance to the
/// nearest target point (point-to-point) or to its tangent plane
/// (point-to-plane). Pairs beyond the gate are dropped, and the truncation
/// keeps the objective bounded so the best pose seen is well defined.
inline double icp_residual(const std::vector<Vec3>& src, const KdTree3& tree, const std::vector<Vec3>& dst,
                           const std::vector<Vec3>* normals, const Pose& pose, double gate2,
                           std::vector<IcpPair>* pairs) {
  double sum = 0.0;
  if (pairs) pairs->clear();
  for (const auto& p : src) {
    const Vec3 tp = pose.apply(p);
    const auto hit = tree.nearest(tp);
    if (hit.dist2 <= gate2) {
      sum += normals ? std::pow((tp - dst[hit.index]).dot((*normals)[hit.index]), 2) : hit.dist2;
      if (pairs) pairs->push_back({p, hit.index});
    } else {
      sum += gate2;
    }
  }
  return sum / static_cast<double>(src.size());
}

inline Pose point_to_point_step(const std::vector<IcpPair>& pairs, const std::vector<Vec3>& dst) {
  CorrespondenceSet corr;
  for (const auto& pr : pairs) corr.add(pr.p, dst[pr.target]);
  return umeyama_align(corr);
}

/// One Gauss-Newton step of sum ((R p + t - q) . n)² about `pose`, with the
/// rotation increment applied exactly.
inline Pose point_to_plane_step(const std::vector<IcpPair>& pairs, const std::vector<Vec3>& dst,
                                const std::vector<Vec3>& normals, const Pose& pose) {
  if (pairs.size() < 6) throw Error(Errc::InsufficientCorrespondences, "point-to-plane step needs 6 pairs");
  Eigen::Matrix<double, 6, 6> a = Eigen::Matrix<double, 6, 6>::Zero();
  Eigen::Matrix<double, 6, 1> b = Eigen::Matrix<double, 6, 1>::Zero();
  for (const auto& pr : pairs) {
    const Vec3 tp = pose.apply(pr.p);
    const Vec3& n = normals[pr.target];
    Eigen::Matrix<double, 6, 1> j;
    j.head<3>() = tp.cross(n);
    j.tail<3>() = n;
    a += j * j.transpose();
    b -= j * (tp - dst[pr.target]).dot(n);
  }
  Eigen::FullPivLU<Eigen::Matrix<double, 6, 6>> lu(a);
  if (lu.rank() < 6) throw Error(Errc::DegenerateConfiguration, "point-to-plane system is rank deficient");
  const Eigen::Matrix<double, 6, 1> x = lu.solve(b);
  const double angle = x.head<3>().norm();
  const Mat3 dr = angle > 0.0 ? Mat3(Eigen::AngleAxisd(angle, x.head<3>() / angle)) : Mat3::Identity();
  return {dr * pose.rotation, dr * pose.translation + x.tail<3>()};
}

}  // namespace detail

/// Nearest-neighbour ICP from `init`, gated at max_corr_dist. Stops when the
/// residual changes by less than convergence_eps or after max_iterations;
/// returns the best pose seen, so the residual never exceeds the initial one.
inline IcpResult icp_refine(const PointCloud& src, const PointCloud& dst, const Pose& init,
                            const IcpParams& params = {}) {
  if (src.empty() || dst.empty()) throw Error(Errc::EmptyCloud, "ICP needs two non-empty clouds");
  const KdTree3 tree(dst.points);
  const double gate2 = params.max_corr_dist * params.max_corr_dist;

  std::vector<Vec3> normals;
  const bool planar = params.metric == IcpMetric::PointToPlane;
  if (planar) {
    if (dst.size() < 3) throw Error(Errc::TooFewPoints, "point-to-plane ICP needs 3 target points");
    const std::size_t k = std::min(params.normal_neighbors, dst.size());
    std::vector<std::size_t> nb;
    normals.reserve(dst.size());
    for (const auto& q : dst.points) {
      nb.clear();
      for (const auto& h : tree.knn(q, k)) nb.push_back(h.index);
      normals.push_back(detail::pca_normal(dst.points, nb));
    }
  }
  const std::vector<Vec3>* nrm = planar ? &normals : nullptr;

  IcpResult out;
  out.pose = init;
  std::vector<detail::IcpPair> pairs;
  double current = detail::icp_residual(src.points, tree, dst.points, nrm, init, gate2, &pairs);
  out.initial_residual = out.residual = current;

  Pose pose = init;
  for (int it = 0; it < params.max_iterations; ++it) {
    try {
      pose = planar ? detail::point_to_plane_step(pairs, dst.points, normals, pose)
                    : detail::point_to_point_step(pairs, dst.points);
    } catch (const Error&) {
      break;
    }
    std::vector<detail::IcpPair> next_pairs;
    const double r = detail::icp_residual(src.points, tree, dst.points, nrm, pose, gate2, &next_pairs);
    out.iterations = it + 1;
    if (r < out.residual) {
      out.residual = r;
      out.pose = pose;
    }
    const bool converged = std::abs(current - r) < params.convergence_eps;
    pairs = std::move(next_pairs);
    current = r;
    if (converged) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rotation-space sampling and chaining
// ---------------------------------------------------------------------------
inline double quat_distance(const Quaternion& a, const Quaternion& b) {
  if (std::abs(a.norm() - 1.0) > 1e-6 || std::abs(b.norm() - 1.0) > 1e-6)
    throw Error(Errc::NonUnitQuaternion, "quaternion norm deviates from 1 by more than 1e-6");
  const Eigen::Vector4d va = a.coeffs(), vb = b.coeffs();
  return std::min((va - vb).norm(), (va + vb).norm());
}

/// Greedy max-min selection under quaternion distance, seeded at start_index.
inline std::vector<std::size_t> farthest_rotation_sample(std::span<const Quaternion> rotations,
                                                         std::size_t k, std::size_t start_index) {
  const std::size_t n = rotations.size();
  if (k < 1 || k > n) throw Error(Errc::InvalidK, "k must be in [1, " + std::to_string(n) + "]");
  if (start_index >= n) throw Error(Errc::InvalidStartIndex, "start index out of range");

  std::vector<std::size_t> picked{start_index};
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  taken[start_index] = true;
  while (picked.size() < k) {
    const auto& last = rotations[picked.back()];
    std::size_t arg = n;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_dist[i] = std::min(min_dist[i], quat_distance(rotations[i], last));
      if (min_dist[i] > best) {
        best = min_dist[i];
        arg = i;
      }
    }
    taken[arg] = true;
    picked.push_back(arg);
  }
  return picked;
}

/// absolute[0] = anchor; absolute[i] = absolute[i-1] * relative[i-1].
/// Each relative pose maps frame-i coordinates into frame-(i-1) coordinates.
inline std::vector<Pose> chain_poses(std::span<const Pose> relative, const Pose& anchor) {
  std::vector<Pose> out;
  out.reserve(relative.size() + 1);
  out.push_back(anchor);
  for (const auto& r : relative) out.push_back(out.back() * r);
  return out;
}

}  // namespace fsp
