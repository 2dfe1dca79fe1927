#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <numeric>
#include <queue>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace fsp {

/// Static 3-D kd-tree over a borrowed point array.
///
/// Built once over an implicit balanced layout (median of each index range,
/// split on the axis of largest spread). Query results are exact; equal
/// distances resolve to the lowest point index so that every query has a
/// unique, reproducible answer.
class KdTree3 {
 public:
  struct Hit {
    std::size_t index = 0;
    double dist2 = std::numeric_limits<double>::infinity();
  };

  KdTree3() = default;

  explicit KdTree3(const std::vector<Eigen::Vector3d>& points) : points_(&points) {
    order_.resize(points.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    axis_.assign(points.size(), 0);
    build(0, order_.size());
  }

  std::size_t size() const { return order_.size(); }

  Hit nearest(const Eigen::Vector3d& q) const {
    Hit best;
    if (!order_.empty()) nearest_rec(q, 0, order_.size(), best);
    return best;
  }

  /// k nearest neighbours, sorted by (distance, index).
  std::vector<Hit> knn(const Eigen::Vector3d& q, std::size_t k) const {
    std::priority_queue<Hit, std::vector<Hit>, HitLess> heap;
    if (k > 0 && !order_.empty()) knn_rec(q, 0, order_.size(), k, heap);
    std::vector<Hit> out;
    out.reserve(heap.size());
    while (!heap.empty()) {
      out.push_back(heap.top());
      heap.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

  /// All points with squared distance <= radius², sorted by index.
  std::vector<std::size_t> radius(const Eigen::Vector3d& q, double radius) const {
    std::vector<std::size_t> out;
    if (!order_.empty()) radius_rec(q, radius * radius, 0, order_.size(), out);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  static constexpr std::size_t kLeaf = 8;

  struct HitLess {
    bool operator()(const Hit& a, const Hit& b) const {
      return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
    }
  };

  const Eigen::Vector3d& pt(std::size_t slot) const { return (*points_)[order_[slot]]; }

  void build(std::size_t lo, std::size_t hi) {
    if (hi - lo <= kLeaf) return;
    Eigen::Vector3d mn = pt(lo), mx = pt(lo);
    for (std::size_t s = lo + 1; s < hi; ++s) {
      mn = mn.cwiseMin(pt(s));
      mx = mx.cwiseMax(pt(s));
    }
    int axis = 0;
    (mx - mn).maxCoeff(&axis);
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi,
                     [&](std::size_t a, std::size_t b) {
                       const double va = (*points_)[a][axis], vb = (*points_)[b][axis];
                       return va < vb || (va == vb && a < b);
                     });
    axis_[mid] = axis;
    build(lo, mid);
    build(mid + 1, hi);
  }

  void consider(const Eigen::Vector3d& q, std::size_t slot, Hit& best) const {
    const double d2 = (pt(slot) - q).squaredNorm();
    const std::size_t idx = order_[slot];
    if (d2 < best.dist2 || (d2 == best.dist2 && idx < best.index)) best = {idx, d2};
  }

  void nearest_rec(const Eigen::Vector3d& q, std::size_t lo, std::size_t hi, Hit& best) const {
    if (hi - lo <= kLeaf) {
      for (std::size_t s = lo; s < hi; ++s) consider(q, s, best);
      return;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    const int axis = axis_[mid];
    const double diff = q[axis] - pt(mid)[axis];
    consider(q, mid, best);
    if (diff < 0) {
      nearest_rec(q, lo, mid, best);
      if (diff * diff <= best.dist2) nearest_rec(q, mid + 1, hi, best);
    } else {
      nearest_rec(q, mid + 1, hi, best);
      if (diff * diff <= best.dist2) nearest_rec(q, lo, mid, best);
    }
  }

  template <class Heap>
  void push_k(const Eigen::Vector3d& q, std::size_t slot, std::size_t k, Heap& heap) const {
    Hit h{order_[slot], (pt(slot) - q).squaredNorm()};
    if (heap.size() < k) {
      heap.push(h);
    } else if (HitLess{}(h, heap.top())) {
      heap.pop();
      heap.push(h);
    }
  }

  template <class Heap>
  void knn_rec(const Eigen::Vector3d& q, std::size_t lo, std::size_t hi, std::size_t k,
               Heap& heap) const {
    if (hi - lo <= kLeaf) {
      for (std::size_t s = lo; s < hi; ++s) push_k(q, s, k, heap);
      return;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    const int axis = axis_[mid];
    const double diff = q[axis] - pt(mid)[axis];
    push_k(q, mid, k, heap);
    const auto bound = [&] {
      return heap.size() < k ? std::numeric_limits<double>::infinity() : heap.top().dist2;
    };
    if (diff < 0) {
      knn_rec(q, lo, mid, k, heap);
      if (diff * diff <= bound()) knn_rec(q, mid + 1, hi, k, heap);
    } else {
      knn_rec(q, mid + 1, hi, k, heap);
      if (diff * diff <= bound()) knn_rec(q, lo, mid, k, heap);
    }
  }

  void radius_rec(const Eigen::Vector3d& q, double r2, std::size_t lo, std::size_t hi,
                  std::vector<std::size_t>& out) const {
    if (hi - lo <= kLeaf) {
      for (std::size_t s = lo; s < hi; ++s)
        if ((pt(s) - q).squaredNorm() <= r2) out.push_back(order_[s]);
      return;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    const int axis = axis_[mid];
    const double diff = q[axis] - pt(mid)[axis];
    if ((pt(mid) - q).squaredNorm() <= r2) out.push_back(order_[mid]);
    if (diff < 0 || diff * diff <= r2) radius_rec(q, r2, lo, mid, out);
    if (diff >= 0 || diff * diff <= r2) radius_rec(q, r2, mid + 1, hi, out);
  }

  const std::vector<Eigen::Vector3d>* points_ = nullptr;
  std::vector<std::size_t> order_;
  std::vector<int> axis_;
};

}  // namespace fsp
