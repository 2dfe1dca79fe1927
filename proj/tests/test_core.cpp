// geom, metrics, attention and matching.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fsp/attention.hpp"
#include "fsp/geom.hpp"
#include "fsp/matching.hpp"
#include "fsp/metrics.hpp"
#include "oracles.hpp"

using namespace fsp;

namespace {

Pose random_pose(Rng& rng, double tscale = 1.0) {
  return Pose::from(random_quaternion(rng), Vec3(uniform(rng, -tscale, tscale), uniform(rng, -tscale, tscale),
                                                 uniform(rng, -tscale, tscale)));
}

std::vector<Vec3> random_points(Rng& rng, std::size_t n, double s = 1.0) {
  std::vector<Vec3> p;
  for (std::size_t i = 0; i < n; ++i) p.emplace_back(uniform(rng, -s, s), uniform(rng, -s, s), uniform(rng, -s, s));
  return p;
}

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double s = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * normal01(rng);
  return m;
}

template <class F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no fsp::Error thrown";
  return Errc::IoError;
}

// exact 90 degree turn about z
const Mat3 kRz90 = (Mat3() << 0, -1, 0, 1, 0, 0, 0, 0, 1).finished();

}  // namespace

// --- quaternion / pose ------------------------------------------------------

TEST(Quaternion, NormalizedHasUnitNorm) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const Quaternion q{normal01(rng) * 5, normal01(rng), normal01(rng), normal01(rng)};
    EXPECT_NEAR(q.normalized().norm(), 1.0, 1e-9);
    EXPECT_NEAR(random_quaternion(rng).norm(), 1.0, 1e-9);
  }
}

TEST(Quaternion, AntipodalSameRotation) {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const auto q = random_quaternion(rng);
    EXPECT_LT((q.to_rotation() - (-q).to_rotation()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Quaternion, HamiltonProductMatchesMatrixProduct) {
  Rng rng(3);
  const auto a = random_quaternion(rng), b = random_quaternion(rng);
  EXPECT_LT(((a * b).to_rotation() - a.to_rotation() * b.to_rotation()).norm(), 1e-12);
}

TEST(Pose, ProperRotationAndInverse) {
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const Pose p = random_pose(rng);
    EXPECT_TRUE(is_proper_rotation(p.rotation));
    const Pose id = p * p.inverse();
    EXPECT_LT((id.rotation - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT(id.translation.norm(), 1e-9);
  }
}

TEST(TransformPoints, IdentityInverseAndTranslation) {
  Rng rng(5);
  PointCloud c;
  c.points = random_points(rng, 40);
  const auto same = transform_points(c, Pose::identity());
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(same.points[i], c.points[i]);

  const Pose p = random_pose(rng);
  const auto back = transform_points(transform_points(c, p), p.inverse());
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_LT((back.points[i] - c.points[i]).norm(), 1e-12);

  const Vec3 t(0.25, -0.5, 2.0);  // dyadic, so the centroid shift is exact
  const auto shifted = transform_points(c, Pose{Mat3::Identity(), t});
  EXPECT_LT((shifted.centroid() - c.centroid() - t).norm(), 1e-14);
}

// --- Umeyama / RANSAC -------------------------------------------------------

TEST(Umeyama, IdentityCase) {
  CorrespondenceSet corr;
  for (const Vec3& p : {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)}) corr.add(p, p);
  const Pose r = umeyama_align(corr);
  EXPECT_LT((r.rotation - Mat3::Identity()).norm(), 1e-9);
  EXPECT_LT(r.translation.norm(), 1e-9);
}

TEST(Umeyama, KnownTransformRoundTrip) {
  Rng rng(6);
  const Pose truth{rot_z(deg2rad(90)), Vec3(1, 2, 3)};
  CorrespondenceSet corr;
  for (const auto& p : random_points(rng, 100)) corr.add(p, truth.apply(p));
  const Pose r = umeyama_align(corr);
  EXPECT_LT((r.rotation - truth.rotation).norm(), 1e-6);
  EXPECT_LT((r.translation - truth.translation).norm(), 1e-6);
  EXPECT_TRUE(is_proper_rotation(r.rotation));
}

TEST(Umeyama, ReflectionIsNeverReturned) {
  // Mirrored targets: best proper rotation, not the reflection.
  Rng rng(7);
  CorrespondenceSet corr;
  for (const auto& p : random_points(rng, 30)) corr.add(p, Vec3(-p.x(), p.y(), p.z()));
  EXPECT_TRUE(is_proper_rotation(umeyama_align(corr).rotation, 1e-9));
}

TEST(Umeyama, Errors) {
  CorrespondenceSet line;
  for (int i = 0; i < 3; ++i) line.add(Vec3(i, 0, 0), Vec3(0, i, 0));
  EXPECT_EQ(code_of([&] { umeyama_align(line); }), Errc::DegenerateConfiguration);
  CorrespondenceSet two;
  two.add(Vec3::Zero(), Vec3::Zero());
  two.add(Vec3::UnitX(), Vec3::UnitX());
  EXPECT_EQ(code_of([&] { umeyama_align(two); }), Errc::InsufficientCorrespondences);
  CorrespondenceSet bad = two;
  bad.target.pop_back();
  EXPECT_EQ(code_of([&] { umeyama_align(bad); }), Errc::ShapeMismatch);
}

TEST(Ransac, ExactPairsAllInliers) {
  Rng rng(8);
  const Pose truth = random_pose(rng);
  CorrespondenceSet corr;
  for (const auto& p : random_points(rng, 100, 0.2)) corr.add(p, truth.apply(p));
  for (std::uint64_t seed : {0ULL, 17ULL}) {
    RansacParams rp;
    rp.seed = seed;
    const auto r = ransac_align(corr, rp);
    EXPECT_LT((r.pose.rotation - truth.rotation).norm(), 1e-6);
    EXPECT_LT((r.pose.translation - truth.translation).norm(), 1e-6);
    EXPECT_EQ(r.inlier_count(), 100u);
    EXPECT_EQ(r.inlier_mask.size(), 100u);
    EXPECT_GE(r.residual, 0.0);
  }
}

TEST(Ransac, OutliersAndDeterminism) {
  Rng rng(9);
  const Pose truth = random_pose(rng, 0.3);
  CorrespondenceSet corr;
  for (const auto& p : random_points(rng, 60, 0.25)) corr.add(p, truth.apply(p));
  for (int i = 0; i < 40; ++i)
    corr.add(Vec3(uniform(rng, -0.25, 0.25), uniform(rng, -0.25, 0.25), uniform(rng, -0.25, 0.25)),
             Vec3(uniform(rng, -0.25, 0.25), uniform(rng, -0.25, 0.25), uniform(rng, -0.25, 0.25)));
  RansacParams rp;
  rp.inlier_threshold = 0.005;
  rp.seed = 3;
  const auto a = ransac_align(corr, rp);
  EXPECT_LT(rotation_error_deg(a.pose.rotation, truth.rotation), 0.5);
  EXPECT_LT((a.pose.translation - truth.translation).norm(), 1e-3);
  for (std::size_t i = 0; i < 60; ++i) EXPECT_TRUE(a.inlier_mask[i]);

  const auto b = ransac_align(corr, rp);
  EXPECT_EQ(a.pose.rotation, b.pose.rotation);
  EXPECT_EQ(a.inlier_mask, b.inlier_mask);
  rp.threads = 4;  // thread count never changes the answer
  const auto c = ransac_align(corr, rp);
  EXPECT_EQ(a.pose.rotation, c.pose.rotation);
  EXPECT_EQ(a.pose.translation, c.pose.translation);
}

TEST(Ransac, Errors) {
  CorrespondenceSet two;
  two.add(Vec3::Zero(), Vec3::Zero());
  two.add(Vec3::UnitX(), Vec3::UnitX());
  EXPECT_EQ(code_of([&] { ransac_align(two); }), Errc::InsufficientCorrespondences);

  Rng rng(10);
  CorrespondenceSet noise;
  for (int i = 0; i < 50; ++i) noise.add(random_points(rng, 1)[0], random_points(rng, 1)[0]);
  RansacParams rp;
  rp.inlier_threshold = 1e-4;
  EXPECT_EQ(code_of([&] { ransac_align(noise, rp); }), Errc::NoConsensus);
  rp.iterations = 0;
  EXPECT_EQ(code_of([&] { ransac_align(noise, rp); }), Errc::InvalidParams);
}

// --- ICP --------------------------------------------------------------------

namespace {
PointCloud sphere_cap(std::size_t n, double r, Rng& rng) {
  PointCloud c;
  while (c.size() < n) {
    const Vec3 d(normal01(rng), normal01(rng), normal01(rng));
    const Vec3 u = d.normalized();
    if (u.z() < 0.3) continue;
    c.points.push_back(r * u + Vec3(0.01, -0.02, 0.03) * (u.x() * u.y()) * 10);  // slightly non-spherical
  }
  return c;
}
}  // namespace

TEST(Icp, IdenticalCloudsStayAtIdentity) {
  Rng rng(11);
  PointCloud c;
  c.points = random_points(rng, 300, 0.1);
  const auto r = icp_refine(c, c, Pose::identity());
  EXPECT_LT((r.pose.rotation - Mat3::Identity()).norm(), 1e-12);
  EXPECT_LT(r.pose.translation.norm(), 1e-12);
  EXPECT_EQ(r.residual, 0.0);
}

TEST(Icp, PerturbedStartImproves) {
  Rng rng(12);
  const PointCloud dst = sphere_cap(4000, 0.1, rng);
  const PointCloud src = sphere_cap(2000, 0.1, rng);
  const Pose perturb{Eigen::AngleAxisd(deg2rad(5), Vec3(1, 2, 0.5).normalized()).toRotationMatrix(),
                     Vec3(0.01, 0, 0)};
  for (auto metric : {IcpMetric::PointToPoint, IcpMetric::PointToPlane}) {
    IcpParams ip;
    ip.metric = metric;
    const auto r = icp_refine(src, dst, perturb, ip);
    const double before = oracle::add(src.points, perturb, Pose::identity());
    const double after = oracle::add(src.points, r.pose, Pose::identity());
    EXPECT_LT(after, before) << static_cast<int>(metric);
    EXPECT_LE(r.residual, r.initial_residual);
  }
}

TEST(Icp, EmptyCloud) {
  PointCloud a, b;
  a.points.push_back(Vec3::Zero());
  EXPECT_EQ(code_of([&] { icp_refine(a, b, Pose::identity()); }), Errc::EmptyCloud);
  EXPECT_EQ(code_of([&] { icp_refine(b, a, Pose::identity()); }), Errc::EmptyCloud);
}

// --- rotation sampling / chaining ------------------------------------------

TEST(QuatDistance, Examples) {
  Rng rng(13);
  const auto q = random_quaternion(rng);
  EXPECT_EQ(quat_distance(q, q), 0.0);
  EXPECT_EQ(quat_distance(q, -q), 0.0);
  EXPECT_NEAR(quat_distance({1, 0, 0, 0}, {0, 0, 0, 1}), std::sqrt(2.0), 1e-15);
  for (int i = 0; i < 100; ++i) {
    const double d = quat_distance(random_quaternion(rng), random_quaternion(rng));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, std::sqrt(2.0) + 1e-12);
  }
  EXPECT_EQ(code_of([] { quat_distance({2, 0, 0, 0}, {1, 0, 0, 0}); }), Errc::NonUnitQuaternion);
}

TEST(FarthestRotationSample, MatchesGreedyOracle) {
  Rng rng(14);
  std::vector<Quaternion> q;
  for (int i = 0; i < 8; ++i) q.push_back(random_quaternion(rng));
  EXPECT_EQ(farthest_rotation_sample(q, 3, 0), oracle::frs(q, 3, 0));
  EXPECT_EQ(farthest_rotation_sample(q, 1, 5), std::vector<std::size_t>{5});
  auto all = farthest_rotation_sample(q, 8, 2);
  EXPECT_EQ(all, oracle::frs(q, 8, 2));
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(all[i], i);
}

TEST(FarthestRotationSample, Errors) {
  std::vector<Quaternion> q(3);
  EXPECT_EQ(code_of([&] { farthest_rotation_sample(q, 0, 0); }), Errc::InvalidK);
  EXPECT_EQ(code_of([&] { farthest_rotation_sample(q, 4, 0); }), Errc::InvalidK);
  EXPECT_EQ(code_of([&] { farthest_rotation_sample(q, 2, 3); }), Errc::InvalidStartIndex);
  q[1] = {0.5, 0, 0, 0};
  EXPECT_EQ(code_of([&] { farthest_rotation_sample(q, 2, 0); }), Errc::NonUnitQuaternion);
}

TEST(ChainPoses, Examples) {
  Rng rng(15);
  const Pose anchor = random_pose(rng);
  const std::vector<Pose> ids(4);
  for (const auto& p : chain_poses(ids, anchor)) {
    EXPECT_EQ(p.rotation, anchor.rotation);
    EXPECT_EQ(p.translation, anchor.translation);
  }
  EXPECT_EQ(chain_poses({}, anchor).size(), 1u);

  const Pose ab = random_pose(rng), bc = random_pose(rng);
  const std::vector<Pose> rel{ab, bc};
  const auto out = chain_poses(rel, anchor);
  ASSERT_EQ(out.size(), 3u);
  const Eigen::Matrix4d direct = [&] {
    auto h = [](const Pose& p) {
      Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
      m.topLeftCorner<3, 3>() = p.rotation;
      m.topRightCorner<3, 1>() = p.translation;
      return m;
    };
    return Eigen::Matrix4d(h(anchor) * h(ab) * h(bc));
  }();
  EXPECT_LT((out[2].rotation - direct.topLeftCorner<3, 3>()).norm(), 1e-12);
  EXPECT_LT((out[2].translation - direct.topRightCorner<3, 1>()).norm(), 1e-12);
}

// --- metrics ----------------------------------------------------------------

TEST(Metrics, AddExamples) {
  Rng rng(16);
  auto model = ObjectModel::from_vertices(random_points(rng, 50, 0.1));
  const Pose gt = random_pose(rng), pred = random_pose(rng);
  EXPECT_EQ(add(model, gt, gt), 0.0);
  const Vec3 t(0.003, -0.004, 0.0);
  EXPECT_NEAR(add(model, Pose{gt.rotation, gt.translation + t}, gt), t.norm(), 1e-15);
  EXPECT_NEAR(add(model, pred, gt), oracle::add(model.vertices, pred, gt), 1e-12);
}

TEST(Metrics, AddsExamples) {
  Rng rng(17);
  auto square = ObjectModel::from_vertices({Vec3(1, 1, 0), Vec3(-1, 1, 0), Vec3(-1, -1, 0), Vec3(1, -1, 0)}, true);
  const Pose gt = random_pose(rng);
  EXPECT_EQ(adds(square, gt, gt), 0.0);
  EXPECT_EQ(adds(square, gt * Pose{kRz90, Vec3::Zero()}, gt), 0.0);
  EXPECT_GT(add(square, gt * Pose{kRz90, Vec3::Zero()}, gt), 1.0);
  for (int i = 0; i < 100; ++i) {
    auto m = ObjectModel::from_vertices(random_points(rng, 1 + uniform_index(rng, 60), 0.1));
    const Pose a = random_pose(rng, 0.1), b = random_pose(rng, 0.1);
    EXPECT_LE(adds(m, a, b), add(m, a, b));
    EXPECT_NEAR(adds(m, a, b), oracle::adds(m.vertices, a, b), 1e-12);
  }
  EXPECT_EQ(square.preferred_metric(), MetricKind::ADDS);
}

TEST(Metrics, EmptyModel) {
  ObjectModel m;
  EXPECT_EQ(code_of([&] { add(m, {}, {}); }), Errc::EmptyModel);
  EXPECT_EQ(code_of([&] { adds(m, {}, {}); }), Errc::EmptyModel);
  EXPECT_EQ(code_of([&] { diameter(std::span<const Vec3>{}); }), Errc::EmptyModel);
}

TEST(Metrics, AucExamples) {
  const std::vector<double> zeros(5, 0.0), big{0.1, 0.2, 1.0};
  EXPECT_EQ(auc(zeros), 1.0);
  EXPECT_EQ(auc(big), 0.0);
  EXPECT_NEAR(auc(std::vector<double>{0.05}), 0.5, 0.001);
  Rng rng(18);
  std::vector<double> errs;
  for (int i = 0; i < 200; ++i) errs.push_back(uniform(rng, 0, 0.12));
  errs.push_back(std::numeric_limits<double>::infinity());
  EXPECT_NEAR(auc(errs, 0.1, 0.001), oracle::auc(errs, 0.1, 0.001), 1e-12);
  EXPECT_EQ(code_of([&] { auc(errs, 0.0, 0.001); }), Errc::InvalidThreshold);
  EXPECT_EQ(code_of([&] { auc(errs, 0.1, 0.2); }), Errc::InvalidThreshold);
}

TEST(Metrics, RecallExamples) {
  EXPECT_EQ(add_recall_at(std::vector<double>{0, 0, 0}, 0.1), 1.0);
  EXPECT_EQ(add_recall_at(std::vector<double>{0.009, 0.011}, 0.1, 0.1), 0.5);
  EXPECT_EQ(code_of([] { add_recall_at(std::vector<double>{0.0}, 0.0); }), Errc::InvalidDiameter);
  const auto r = summarize(MetricKind::ADD, {0.0, 0.2}, 0.5);
  EXPECT_EQ(r.recall_at_0p1d, 0.5);
  EXPECT_GE(r.auc, 0.0);
  EXPECT_LE(r.auc, 1.0);
}

TEST(Metrics, DiameterExamples) {
  std::vector<Vec3> cube;
  for (int i = 0; i < 8; ++i) cube.emplace_back(i & 1, (i >> 1) & 1, (i >> 2) & 1);
  EXPECT_NEAR(diameter(cube), std::sqrt(3.0), 1e-15);
  EXPECT_EQ(diameter(std::vector<Vec3>{Vec3(1, 2, 3)}), 0.0);
  Rng rng(19);
  const auto pts = random_points(rng, 200);
  EXPECT_EQ(diameter(pts), oracle::diameter(pts));
}

// --- attention --------------------------------------------------------------

TEST(SoftmaxAttention, Examples) {
  Rng rng(20);
  const auto q = random_matrix(rng, 5, 4), k1 = random_matrix(rng, 1, 4), v1 = random_matrix(rng, 1, 3);
  const auto one = softmax_attention(q, k1, v1);
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_EQ(one.row(i), v1.row(0));

  const Eigen::MatrixXd same = k1.replicate(6, 1), v = random_matrix(rng, 6, 3);
  const auto mean = softmax_attention(q, same, v);
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_LT((mean.row(i) - v.colwise().mean()).norm(), 1e-12);

  const auto k = random_matrix(rng, 5, 4), vv = random_matrix(rng, 5, 4);
  EXPECT_LT((softmax_attention(q, k, vv) - oracle::softmax_attention(q, k, vv)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(LinearAttention, Examples) {
  Rng rng(21);
  const auto q = random_matrix(rng, 6, 8), k1 = random_matrix(rng, 1, 8), v1 = random_matrix(rng, 1, 8);
  const auto one = linear_attention(q, k1, v1);
  for (Eigen::Index i = 0; i < 6; ++i) EXPECT_EQ(one.row(i), v1.row(0));

  const Eigen::MatrixXd same = k1.replicate(7, 1), v = random_matrix(rng, 7, 8);
  const auto mean = linear_attention(q, same, v);
  for (Eigen::Index i = 0; i < 6; ++i) EXPECT_LT((mean.row(i) - v.colwise().mean()).norm(), 1e-12);

  const auto k = random_matrix(rng, 6, 8), vv = random_matrix(rng, 6, 8);
  EXPECT_LT((linear_attention(q, k, vv) - oracle::linear_attention(q, k, vv)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(LinearAttention, ShapeErrors) {
  const Eigen::MatrixXd a = Eigen::MatrixXd::Ones(3, 4), b = Eigen::MatrixXd::Ones(2, 4), c = Eigen::MatrixXd::Ones(3, 5);
  EXPECT_EQ(code_of([&] { linear_attention(a, a, b); }), Errc::ShapeMismatch);
  EXPECT_EQ(code_of([&] { linear_attention(c, a, a); }), Errc::ShapeMismatch);
  EXPECT_EQ(code_of([&] { linear_attention(a, Eigen::MatrixXd(0, 4), Eigen::MatrixXd(0, 4)); }), Errc::ShapeMismatch);
}

namespace {
BlockWeights random_block(Rng& rng, Eigen::Index d) {
  const double s = 1.0 / std::sqrt(double(d));
  return {random_matrix(rng, d, d, s), random_matrix(rng, d, d, s), random_matrix(rng, d, d, s),
          random_matrix(rng, d, d, s)};
}
Eigen::MatrixXd permute_rows(const Eigen::MatrixXd& m, const std::vector<int>& perm) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.row(i) = m.row(perm[static_cast<std::size_t>(i)]);
  return out;
}
}  // namespace

TEST(AttentionBlocks, SelfBlock) {
  Rng rng(22);
  const auto t = random_matrix(rng, 10, 6);
  EXPECT_EQ(self_attention_block(t, BlockWeights::zeros(6)), t);
  const auto w = random_block(rng, 6);
  const auto out = self_attention_block(t, w);
  EXPECT_EQ(out.rows(), t.rows());
  EXPECT_EQ(out.cols(), t.cols());
  std::vector<int> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  EXPECT_LT((self_attention_block(permute_rows(t, perm), w) - permute_rows(out, perm)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(code_of([&] { self_attention_block(t, BlockWeights::zeros(5)); }), Errc::ShapeMismatch);
}

TEST(AttentionBlocks, CrossBlock) {
  Rng rng(23);
  const auto t = random_matrix(rng, 7, 6), ctx = random_matrix(rng, 9, 6);
  EXPECT_EQ(cross_attention_block(t, ctx, BlockWeights::zeros(6)), t);
  const auto w = random_block(rng, 6);
  std::vector<int> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  EXPECT_LT((cross_attention_block(t, permute_rows(ctx, perm), w) - cross_attention_block(t, ctx, w)).cwiseAbs().maxCoeff(),
            1e-9);
  EXPECT_LT((cross_attention_block(t, t, w) - self_attention_block(t, w)).cwiseAbs().maxCoeff(), 1e-9);
}

namespace {
FeatureCloud random_features(Rng& rng, std::size_t n, Eigen::Index d) {
  FeatureCloud f;
  f.points = random_points(rng, n);
  f.source_pixels.resize(n);
  f.descriptors = random_matrix(rng, static_cast<Eigen::Index>(n), d);
  normalize_rows(f.descriptors);
  return f;
}
}  // namespace

TEST(Enhance, ZeroWeightsAndCoordinates) {
  Rng rng(24);
  const auto s = random_features(rng, 20, kDescriptorDim), q = random_features(rng, 15, kDescriptorDim);
  const auto out = enhance(s, q, AttentionWeights::zeros());
  EXPECT_LT((out.prototypes.descriptors - s.descriptors).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((out.query_features.descriptors - q.descriptors).cwiseAbs().maxCoeff(), 1e-15);

  const auto r = enhance(s, q, AttentionWeights::random(3));
  EXPECT_EQ(r.prototypes.points, s.points);
  EXPECT_EQ(r.query_features.points, q.points);
  for (Eigen::Index i = 0; i < r.prototypes.descriptors.rows(); ++i)
    EXPECT_NEAR(r.prototypes.descriptors.row(i).norm(), 1.0, 1e-12);
}

TEST(Enhance, MirroredWeightsSwapOutputs) {
  Rng rng(25);
  const auto s = random_features(rng, 12, kDescriptorDim), q = random_features(rng, 18, kDescriptorDim);
  const auto w = AttentionWeights::random(9, kDescriptorDim, 0.7);
  const auto a = enhance(s, q, w);
  const auto b = enhance(q, s, w.mirrored());
  EXPECT_LT((a.prototypes.descriptors - b.query_features.descriptors).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.query_features.descriptors - b.prototypes.descriptors).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Enhance, Errors) {
  Rng rng(26);
  const auto s = random_features(rng, 5, 8);
  EXPECT_EQ(code_of([&] { enhance(s, s, AttentionWeights::zeros()); }), Errc::ShapeMismatch);
  EXPECT_EQ(code_of([&] { enhance(FeatureCloud{}, s, AttentionWeights::zeros(8)); }), Errc::EmptyCloud);
}

TEST(AttentionWeights, SeededInitIsReproducible) {
  EXPECT_EQ(AttentionWeights::random(5), AttentionWeights::random(5));
  EXPECT_FALSE(AttentionWeights::random(5) == AttentionWeights::random(6));
}

// --- matching ---------------------------------------------------------------

TEST(ScoreMatrix, Examples) {
  FeatureCloud a;
  a.descriptors = Eigen::MatrixXd::Identity(4, 4);
  EXPECT_EQ(score_matrix(a, a, 1.0), Eigen::MatrixXd::Identity(4, 4));

  Rng rng(27);
  const auto p = random_features(rng, 8, 6), q = random_features(rng, 5, 6);
  const auto s = score_matrix(p, q, 0.1);
  EXPECT_LE(s.cwiseAbs().maxCoeff(), 10.0 + 1e-12);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 5; ++j) {
      double dot = 0;
      for (int c = 0; c < 6; ++c) dot += p.descriptors(i, c) * q.descriptors(j, c);
      EXPECT_NEAR(s(i, j), dot / 0.1, 1e-12);
    }
  const auto r = random_features(rng, 5, 7);
  EXPECT_EQ(code_of([&] { score_matrix(p, r); }), Errc::DimensionMismatch);
  EXPECT_EQ(code_of([&] { score_matrix(p, q, 0.0); }), Errc::InvalidParams);
}

TEST(Sinkhorn, UniformScores) {
  SinkhornParams sp;
  sp.use_dustbin = false;
  const auto a = sinkhorn(Eigen::MatrixXd::Constant(6, 6, 0.3), sp);
  EXPECT_LT((a.prob.array() - 1.0 / 6).abs().maxCoeff(), 1e-12);
}

TEST(Sinkhorn, DiagonalDominates) {
  const Eigen::MatrixXd s = 10.0 * Eigen::MatrixXd::Identity(8, 8);
  for (bool dustbin : {false, true}) {
    SinkhornParams sp;
    sp.iterations = 100;
    sp.use_dustbin = dustbin;
    const auto a = sinkhorn(s, sp);
    for (Eigen::Index i = 0; i < 8; ++i) {
      Eigen::Index arg;
      a.prob.row(i).head(8).maxCoeff(&arg);
      EXPECT_EQ(arg, i);
    }
  }
}

TEST(Sinkhorn, MarginalsBothModes) {
  Rng rng(28);
  for (int anderson : {0, 5}) {
    for (bool dustbin : {false, true}) {
      SinkhornParams sp;
      sp.use_dustbin = dustbin;
      sp.anderson_memory = anderson;
      sp.iterations = anderson ? 100 : 3000;
      const Eigen::MatrixXd s = random_matrix(rng, 30, 30, anderson ? 3.0 : 1.0);
      const auto a = sinkhorn(s, sp);
      EXPECT_LT((a.prob.rowwise().sum() - a.target_row_sums()).cwiseAbs().maxCoeff(), 1e-6);
      EXPECT_LT((a.prob.colwise().sum().transpose() - a.target_col_sums()).cwiseAbs().maxCoeff(), 1e-6);
      EXPECT_GE(a.prob.minCoeff(), 0.0);
    }
  }
}

TEST(Sinkhorn, RectangularWithoutDustbin) {
  Rng rng(29);
  SinkhornParams sp;
  sp.use_dustbin = false;
  sp.iterations = 100;
  const auto a = sinkhorn(random_matrix(rng, 5, 9), sp);
  EXPECT_LT((a.prob.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-9);
  EXPECT_LT((a.prob.colwise().sum().array() - 5.0 / 9).abs().maxCoeff(), 1e-9);
}

TEST(Sinkhorn, AcceleratedAndPlainAgreeAtConvergence) {
  Rng rng(30);
  const Eigen::MatrixXd s = random_matrix(rng, 12, 10, 1.0);
  SinkhornParams plain, fast;
  plain.anderson_memory = 0;
  plain.iterations = 20000;
  fast.iterations = 200;
  EXPECT_LT((sinkhorn(s, plain).prob - sinkhorn(s, fast).prob).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Sinkhorn, Errors) {
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(3, 3);
  SinkhornParams sp;
  sp.iterations = 0;
  EXPECT_EQ(code_of([&] { sinkhorn(s, sp); }), Errc::InvalidParams);
  s(1, 1) = std::nan("");
  EXPECT_EQ(code_of([&] { sinkhorn(s); }), Errc::NonFiniteScores);
  EXPECT_EQ(code_of([&] { sinkhorn(Eigen::MatrixXd(0, 3)); }), Errc::ShapeMismatch);
}

TEST(ExtractMatches, Examples) {
  Assignment id{Eigen::MatrixXd::Identity(5, 5), false};
  const auto m = extract_matches(id, 0.5);
  ASSERT_EQ(m.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(m[i], (Match{i, i, 1.0}));
  EXPECT_TRUE(extract_matches(id, 1.1).empty());

  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd p = random_matrix(rng, 13, 10).cwiseAbs();
    p /= p.maxCoeff();
    const Assignment a{p, true};  // last row / column are the dustbin
    const auto got = extract_matches(a, 0.1);
    const auto want = oracle::mutual_argmax(p.topLeftCorner(12, 9), 0.1);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].prototype, want[i].first);
      EXPECT_EQ(got[i].query, want[i].second);
    }
  }
}

TEST(MatchingNll, Examples) {
  const std::vector<std::pair<std::size_t, std::size_t>> gt{{0, 0}, {1, 2}, {3, 1}};
  Assignment ones{Eigen::MatrixXd::Ones(4, 4), false};
  EXPECT_EQ(matching_nll_loss(ones, gt).value, 0.0);
  Assignment uni{Eigen::MatrixXd::Constant(4, 4, 0.25), false};
  EXPECT_NEAR(matching_nll_loss(uni, gt).value, std::log(4.0), 1e-15);

  Rng rng(32);
  Assignment r{random_matrix(rng, 4, 4).cwiseAbs(), false};
  r.prob(3, 1) = 0.0;
  const auto res = matching_nll_loss(r, gt);
  const double want = -(std::log(r.prob(0, 0)) + std::log(r.prob(1, 2)) + std::log(1e-12)) / 3;
  EXPECT_NEAR(res.value, want, 1e-12);
  EXPECT_TRUE(res.clamped);
  EXPECT_EQ(matching_nll_loss(r, {}).value, 0.0);
  const std::vector<std::pair<std::size_t, std::size_t>> out{{4, 0}};
  EXPECT_EQ(code_of([&] { matching_nll_loss(r, out); }), Errc::IndexOutOfRange);
}
