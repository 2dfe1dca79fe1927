#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fsp/error.hpp"
#include "fsp/geom.hpp"

namespace fsp {

enum class MetricKind { ADD, ADDS };

inline std::string to_string(MetricKind k) { return k == MetricKind::ADD ? "ADD" : "ADDS"; }

/// Max pairwise vertex distance (exhaustive scan).
inline double diameter(std::span<const Vec3> vertices) {
  if (vertices.empty()) throw Error(Errc::EmptyModel, "diameter of an empty vertex set");
  double best2 = 0.0;
  for (std::size_t i = 0; i < vertices.size(); ++i)
    for (std::size_t j = i + 1; j < vertices.size(); ++j)
      best2 = std::max(best2, (vertices[i] - vertices[j]).squaredNorm());
  return std::sqrt(best2);
}

inline double diameter(const PointCloud& cloud) { return diameter(std::span<const Vec3>(cloud.points)); }

struct ObjectModel {
  std::vector<Vec3> vertices;
  double diameter = 0.0;
  bool symmetric = false;

  static ObjectModel from_vertices(std::vector<Vec3> v, bool symmetric = false) {
    ObjectModel m;
    m.diameter = fsp::diameter(std::span<const Vec3>(v));
    m.vertices = std::move(v);
    m.symmetric = symmetric;
    return m;
  }

  MetricKind preferred_metric() const { return symmetric ? MetricKind::ADDS : MetricKind::ADD; }
};

/// Mean distance between corresponding model vertices under two poses.
inline double add(const ObjectModel& model, const Pose& pred, const Pose& gt) {
  if (model.vertices.empty()) throw Error(Errc::EmptyModel, "ADD on an empty model");
  double sum = 0.0;
  for (const auto& v : model.vertices) sum += (pred.apply(v) - gt.apply(v)).norm();
  return sum / static_cast<double>(model.vertices.size());
}

/// Mean closest-point distance from predicted vertices to ground-truth vertices.
/// Exact O(m²) scan; models here stay at desk scale.
inline double adds(const ObjectModel& model, const Pose& pred, const Pose& gt) {
  if (model.vertices.empty()) throw Error(Errc::EmptyModel, "ADDS on an empty model");
  std::vector<Vec3> gt_pts;
  gt_pts.reserve(model.vertices.size());
  for (const auto& v : model.vertices) gt_pts.push_back(gt.apply(v));
  double sum = 0.0;
  for (const auto& v : model.vertices) {
    const Vec3 p = pred.apply(v);
    double best2 = std::numeric_limits<double>::infinity();
    for (const auto& g : gt_pts) best2 = std::min(best2, (p - g).squaredNorm());
    sum += std::sqrt(best2);
  }
  return sum / static_cast<double>(model.vertices.size());
}

inline double pose_error(MetricKind kind, const ObjectModel& model, const Pose& pred, const Pose& gt) {
  return kind == MetricKind::ADD ? add(model, pred, gt) : adds(model, pred, gt);
}

/// Area under the accuracy-threshold curve: mean over t = step, 2 step, ...,
/// max_threshold of the share of errors strictly below t. Infinite errors
/// (failed estimates) never count as hits.
inline double auc(std::span<const double> errors, double max_threshold = 0.1, double step = 0.001) {
  if (!(max_threshold > 0.0) || !(step > 0.0) || step > max_threshold)
    throw Error(Errc::InvalidThreshold, "need 0 < step <= max_threshold");
  if (errors.empty()) return 0.0;
  const auto steps = static_cast<long>(std::llround(max_threshold / step));
  std::vector<double> sorted(errors.begin(), errors.end());
  std::sort(sorted.begin(), sorted.end());
  double acc = 0.0;
  for (long k = 1; k <= steps; ++k) {
    const double t = static_cast<double>(k) * step;
    const auto below = std::lower_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    acc += static_cast<double>(below) / static_cast<double>(sorted.size());
  }
  return acc / static_cast<double>(steps);
}

/// Share of errors strictly below fraction * diameter.
inline double add_recall_at(std::span<const double> errors, double diameter, double fraction = 0.1) {
  if (!(diameter > 0.0)) throw Error(Errc::InvalidDiameter, "diameter must be positive");
  if (!(fraction > 0.0)) throw Error(Errc::InvalidThreshold, "fraction must be positive");
  if (errors.empty()) return 0.0;
  const double t = fraction * diameter;
  const auto hits = std::count_if(errors.begin(), errors.end(), [t](double e) { return e < t; });
  return static_cast<double>(hits) / static_cast<double>(errors.size());
}

struct MetricReport {
  MetricKind metric_kind = MetricKind::ADD;
  std::vector<double> per_frame_errors;
  double auc = 0.0;
  double recall_at_0p1d = 0.0;
};

inline MetricReport summarize(MetricKind kind, std::vector<double> errors, double diameter,
                              double auc_max = 0.1, double auc_step = 0.001,
                              double recall_fraction = 0.1) {
  MetricReport r;
  r.metric_kind = kind;
  r.auc = auc(errors, auc_max, auc_step);
  r.recall_at_0p1d = add_recall_at(errors, diameter, recall_fraction);
  r.per_frame_errors = std::move(errors);
  return r;
}

}  // namespace fsp
