#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fsp/error.hpp"
#include "fsp/geom.hpp"
#include "fsp/image.hpp"
#include "fsp/kdtree.hpp"

namespace fsp {

struct Intrinsics {
  double fx = 600.0, fy = 600.0;
  double cx = 319.5, cy = 239.5;
  int width = 640, height = 480;

  bool valid() const {
    return fx > 0 && fy > 0 && width > 0 && height > 0 && cx >= 0 && cx < width && cy >= 0 &&
           cy < height;
  }
};

struct Projection {
  double u = 0.0, v = 0.0, depth = 0.0;
};

inline Projection project(const Vec3& p, const Intrinsics& k) {
  if (!(p.z() > 0.0)) throw Error(Errc::BehindCamera, "point has z <= 0");
  return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy, p.z()};
}

/// Inverse of project for a continuous pixel coordinate.
inline Vec3 backproject_pixel(double u, double v, double z, const Intrinsics& k) {
  return {(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z};
}

struct PixelCoord {
  int row = 0, col = 0;
  bool operator==(const PixelCoord&) const = default;
};

struct RgbdPatch {
  RgbImage rgb;
  DepthImage depth;
  MaskImage mask;
  Intrinsics intrinsics;
  std::optional<Pose> pose;  ///< ground truth, object -> camera

  int width() const { return depth.width; }
  int height() const { return depth.height; }

  /// Shape agreement and mask ⊆ valid depth (masked zero-depth pixels are cleared).
  void validate() {
    const int w = depth.width, h = depth.height;
    if (!rgb.same_shape(w, h) || !mask.same_shape(w, h) || rgb.channels != 3)
      throw Error(Errc::ShapeMismatch, "rgb/depth/mask sizes differ");
    for (std::size_t i = 0; i < depth.data.size(); ++i) {
      if (depth.data[i] < 0.0) throw Error(Errc::InvalidParams, "negative depth");
      if (depth.data[i] == 0.0) mask.data[i] = 0;
    }
  }

  std::size_t mask_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.data.size(); ++i) n += (mask.data[i] && depth.data[i] > 0.0);
    return n;
  }
};

struct BackprojectedCloud {
  PointCloud cloud;
  std::vector<PixelCoord> pixels;
};

/// Masked pixels with positive depth, in camera coordinates, row-major order.
inline BackprojectedCloud backproject(const RgbdPatch& patch) {
  BackprojectedCloud out;
  const auto& k = patch.intrinsics;
  const bool has_rgb = patch.rgb.same_shape(patch.depth.width, patch.depth.height);
  for (int r = 0; r < patch.depth.height; ++r) {
    for (int c = 0; c < patch.depth.width; ++c) {
      const double z = patch.depth.at(r, c);
      if (!(z > 0.0) || !patch.mask.at(r, c)) continue;
      out.cloud.points.push_back(backproject_pixel(c, r, z, k));
      if (has_rgb)
        out.cloud.colors.emplace_back(patch.rgb.at(r, c, 0), patch.rgb.at(r, c, 1), patch.rgb.at(r, c, 2));
      out.pixels.push_back({r, c});
    }
  }
  return out;
}

/// Greedy max-min Euclidean subsampling seeded at start_index; ties go to the lowest index.
inline std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> points, std::size_t n,
                                                      std::size_t start_index = 0) {
  const std::size_t size = points.size();
  if (n < 1 || n > size) throw Error(Errc::InvalidN, "n must be in [1, cloud size]");
  if (start_index >= size) throw Error(Errc::InvalidStartIndex, "start index out of range");
  std::vector<double> min_d2(size, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> picked{start_index};
  min_d2[start_index] = -1.0;
  while (picked.size() < n) {
    const Vec3& last = points[picked.back()];
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < size; ++i) {
      if (min_d2[i] < 0.0) continue;
      min_d2[i] = std::min(min_d2[i], (points[i] - last).squaredNorm());
      if (min_d2[i] > best) {
        best = min_d2[i];
        arg = i;
      }
    }
    min_d2[arg] = -1.0;
    picked.push_back(arg);
  }
  return picked;
}

/// Per-point PCA normals over the k nearest neighbours (self included),
/// oriented toward the camera origin.
inline std::vector<Vec3> estimate_normals(const PointCloud& cloud, std::size_t k_neighbors) {
  if (k_neighbors < 3 || cloud.size() <= k_neighbors)
    throw Error(Errc::TooFewPoints, "need cloud size > k_neighbors >= 3");
  const KdTree3 tree(cloud.points);
  std::vector<Vec3> normals;
  normals.reserve(cloud.size());
  std::vector<std::size_t> nb;
  for (const auto& p : cloud.points) {
    nb.clear();
    for (const auto& h : tree.knn(p, k_neighbors)) nb.push_back(h.index);
    Vec3 n = detail::pca_normal(cloud.points, nb);
    if (n.dot(p) > 0.0) n = -n;
    normals.push_back(n);
  }
  return normals;
}

// ---------------------------------------------------------------------------
// Toy dense features
// ---------------------------------------------------------------------------
struct FeatureCloud {
  std::vector<Vec3> points;
  Eigen::MatrixXd descriptors;  ///< N x d, row i describes points[i]
  std::vector<PixelCoord> source_pixels;

  std::size_t size() const { return points.size(); }
  Eigen::Index dim() const { return descriptors.cols(); }

  void validate() const {
    if (static_cast<std::size_t>(descriptors.rows()) != points.size() ||
        source_pixels.size() != points.size())
      throw Error(Errc::ShapeMismatch, "feature cloud fields differ in length");
  }
};

struct FeatureParams {
  std::size_t n_points = 512;
  double geometry_radius = 0.02;  ///< metres
  std::size_t normal_neighbors = 16;
  int color_window = 2;           ///< half-width of the colour window, pixels
  double color_weight = 1.0;
  double geometry_weight = 1.0;
};

inline constexpr int kColorChannels = 8;
inline constexpr int kGeometryBins = 24;
inline constexpr int kDescriptorDim = kColorChannels + kGeometryBins;

/// Rotation-invariant geometry histograms for cloud[indices] over radius
/// neighbourhoods of the full cloud. Three 8-bin groups: |cos| between the
/// normal and each displacement, displacement length / radius, and
/// |height above the tangent plane| / radius. Each group sums to one.
inline Eigen::MatrixXd geometry_descriptors(const PointCloud& cloud, const KdTree3& tree,
                                            std::span<const std::size_t> indices,
                                            const FeatureParams& params) {
  constexpr int kGroup = kGeometryBins / 3;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(indices.size()), kGeometryBins);
  const double r = params.geometry_radius;
  std::vector<std::size_t> nb;
  for (std::size_t row = 0; row < indices.size(); ++row) {
    const Vec3& p = cloud.points[indices[row]];
    nb.clear();
    const std::size_t k = std::min(params.normal_neighbors, cloud.size());
    for (const auto& h : tree.knn(p, k)) nb.push_back(h.index);
    if (nb.size() < 3) continue;
    const Vec3 n = detail::pca_normal(cloud.points, nb);

    const auto ball = tree.radius(p, r);
    double count = 0.0;
    const auto bin = [](double x) { return std::clamp(static_cast<int>(x * kGroup), 0, kGroup - 1); };
    for (auto j : ball) {
      const Vec3 d = cloud.points[j] - p;
      const double len = d.norm();
      if (len <= 0.0) continue;
      const double c = std::abs(n.dot(d)) / len;
      out(static_cast<Eigen::Index>(row), bin(c)) += 1.0;
      out(static_cast<Eigen::Index>(row), kGroup + bin(len / r)) += 1.0;
      out(static_cast<Eigen::Index>(row), 2 * kGroup + bin(std::abs(n.dot(d)) / r)) += 1.0;
      count += 1.0;
    }
    if (count > 0.0) out.row(static_cast<Eigen::Index>(row)) /= count;
  }
  return out;
}

/// Pixel colour, window mean colour, window luminance std-dev, and
/// centre-minus-window luminance. Colour values are centred on 0.5.
inline Eigen::MatrixXd color_descriptors(const RgbdPatch& patch, std::span<const PixelCoord> pixels,
                                         int window) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(pixels.size()), kColorChannels);
  const auto lum = [&](int r, int c) {
    return 0.299 * patch.rgb.at(r, c, 0) + 0.587 * patch.rgb.at(r, c, 1) + 0.114 * patch.rgb.at(r, c, 2);
  };
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const auto [r0, c0] = pixels[i];
    Vec3 mean = Vec3::Zero();
    double lsum = 0.0, lsq = 0.0, cnt = 0.0;
    for (int dr = -window; dr <= window; ++dr)
      for (int dc = -window; dc <= window; ++dc) {
        const int r = r0 + dr, c = c0 + dc;
        if (!patch.mask.contains(r, c) || !patch.mask.at(r, c)) continue;
        mean += Vec3(patch.rgb.at(r, c, 0), patch.rgb.at(r, c, 1), patch.rgb.at(r, c, 2));
        const double l = lum(r, c);
        lsum += l;
        lsq += l * l;
        cnt += 1.0;
      }
    mean /= cnt;  // the centre pixel is always masked
    const double lmean = lsum / cnt;
    const double lstd = std::sqrt(std::max(0.0, lsq / cnt - lmean * lmean));
    const auto ri = static_cast<Eigen::Index>(i);
    for (int ch = 0; ch < 3; ++ch) {
      out(ri, ch) = patch.rgb.at(r0, c0, ch) - 0.5;
      out(ri, 3 + ch) = mean[ch] - 0.5;
    }
    out(ri, 6) = lstd;
    out(ri, 7) = lum(r0, c0) - lmean;
  }
  return out;
}

/// Back-project, farthest-point-sample to the token budget, describe each
/// sampled point, L2-normalize. The seed picks the sampling start point.
inline FeatureCloud extract_toy_features(const RgbdPatch& patch, std::uint64_t seed,
                                         const FeatureParams& params = {}) {
  const auto bp = backproject(patch);
  if (bp.cloud.empty()) throw Error(Errc::EmptyMask, "patch has no masked pixels with valid depth");
  const std::size_t n = std::min(params.n_points, bp.cloud.size());
  const auto start = static_cast<std::size_t>(splitmix64(seed) % bp.cloud.size());
  const auto idx = farthest_point_sample(bp.cloud.points, n, start);

  FeatureCloud fc;
  fc.points.reserve(n);
  fc.source_pixels.reserve(n);
  for (auto i : idx) {
    fc.points.push_back(bp.cloud.points[i]);
    fc.source_pixels.push_back(bp.pixels[i]);
  }
  const KdTree3 tree(bp.cloud.points);
  const Eigen::MatrixXd geo = geometry_descriptors(bp.cloud, tree, idx, params);
  const Eigen::MatrixXd col = color_descriptors(patch, fc.source_pixels, params.color_window);

  fc.descriptors.resize(static_cast<Eigen::Index>(n), kDescriptorDim);
  fc.descriptors.leftCols(kColorChannels) = params.color_weight * col;
  fc.descriptors.rightCols(kGeometryBins) = params.geometry_weight * geo;
  for (Eigen::Index i = 0; i < fc.descriptors.rows(); ++i) {
    const double norm = fc.descriptors.row(i).norm();
    if (norm > 0.0) {
      fc.descriptors.row(i) /= norm;
    } else {
      fc.descriptors(i, 0) = 1.0;
    }
  }
  return fc;
}

// ---------------------------------------------------------------------------
// Patch preparation: crop around the mask, resample to a square patch.
// ---------------------------------------------------------------------------
struct PixelBox {
  int row0 = 0, col0 = 0, row1 = 0, col1 = 0;  ///< half-open
};

inline std::optional<PixelBox> mask_bbox(const MaskImage& mask) {
  PixelBox b{mask.height, mask.width, -1, -1};
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c)
      if (mask.at(r, c)) {
        b.row0 = std::min(b.row0, r);
        b.col0 = std::min(b.col0, c);
        b.row1 = std::max(b.row1, r + 1);
        b.col1 = std::max(b.col1, c + 1);
      }
  if (b.row1 < 0) return std::nullopt;
  return b;
}

/// Crops a square window around the mask bounding box (padded by `padding`
/// pixels) and resamples it to size x size. Inside the mask, colour and depth
/// are bilinear when all four source neighbours are masked, so slanted
/// surfaces stay slanted; elsewhere the lookup is nearest-neighbour. Depth
/// values are never rescaled; intrinsics follow the resample, so the
/// principal point of a crop may lie outside the crop.
inline RgbdPatch crop_resize(const RgbdPatch& patch, int size = 255, int padding = 4) {
  const auto box = mask_bbox(patch.mask);
  if (!box) throw Error(Errc::EmptyMask, "cannot crop an empty mask");
  const int h = box->row1 - box->row0, w = box->col1 - box->col0;
  const int side = std::max(h, w) + 2 * padding;
  const double r0 = box->row0 + h / 2.0 - side / 2.0;  // continuous pixel-edge coordinates
  const double c0 = box->col0 + w / 2.0 - side / 2.0;
  const double scale = static_cast<double>(size) / side;

  RgbdPatch out;
  out.rgb = RgbImage(size, size, 3);
  out.depth = DepthImage(size, size, 1);
  out.mask = MaskImage(size, size, 1);
  out.pose = patch.pose;
  // Output pixel centre j maps to source coordinate c0 + (j + 0.5) / scale - 0.5.
  const auto& k = patch.intrinsics;
  out.intrinsics.fx = k.fx * scale;
  out.intrinsics.fy = k.fy * scale;
  out.intrinsics.cx = (k.cx - c0 + 0.5) * scale - 0.5;
  out.intrinsics.cy = (k.cy - r0 + 0.5) * scale - 0.5;
  out.intrinsics.width = size;
  out.intrinsics.height = size;

  const auto usable = [&](int r, int c) {
    return patch.depth.contains(r, c) && patch.mask.at(r, c) && patch.depth.at(r, c) > 0.0;
  };
  for (int r = 0; r < size; ++r) {
    const double y = r0 + (r + 0.5) / scale - 0.5;
    const int sr = static_cast<int>(std::floor(y + 0.5));
    const int yr = static_cast<int>(std::floor(y));
    const double fy = y - yr;
    for (int c = 0; c < size; ++c) {
      const double x = c0 + (c + 0.5) / scale - 0.5;
      const int sc = static_cast<int>(std::floor(x + 0.5));
      if (!patch.depth.contains(sr, sc)) continue;
      out.mask.at(r, c) = patch.mask.at(sr, sc);
      const int xc = static_cast<int>(std::floor(x));
      const double fx = x - xc;
      if (out.mask.at(r, c) && usable(yr, xc) && usable(yr, xc + 1) && usable(yr + 1, xc) && usable(yr + 1, xc + 1)) {
        const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
        const auto mix = [&](const auto& img, int ch) {
          return w00 * img.at(yr, xc, ch) + w01 * img.at(yr, xc + 1, ch) + w10 * img.at(yr + 1, xc, ch) +
                 w11 * img.at(yr + 1, xc + 1, ch);
        };
        for (int ch = 0; ch < 3; ++ch) out.rgb.at(r, c, ch) = static_cast<float>(mix(patch.rgb, ch));
        out.depth.at(r, c) = mix(patch.depth, 0);
      } else {
        for (int ch = 0; ch < 3; ++ch) out.rgb.at(r, c, ch) = patch.rgb.at(sr, sc, ch);
        out.depth.at(r, c) = patch.depth.at(sr, sc);
      }
    }
  }
  return out;
}

}  // namespace fsp
