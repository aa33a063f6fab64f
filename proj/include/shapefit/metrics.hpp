#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "shapefit/geometry.hpp"
#include "shapefit/sdf_grid.hpp"
#include "shapefit/types.hpp"

namespace shapefit {

struct ShapeMetrics {
  double completeness = 0.0;  // fraction of GT points with an estimate within tau
  double accuracy = 0.0;      // fraction of estimate points with GT within tau
  double f1 = 0.0;
  double rmse = 0.0;          // over matched GT points only
  double tau = 0.0;
  int matched = 0;
};

namespace detail {

/// Uniform hash grid with cell edge tau: any pair within tau lies in adjacent
/// cells, so the 27-cell neighborhood is an exact candidate superset.
class PointHash {
 public:
  PointHash(const std::vector<Vec3>& points, double cell) : cell_(cell) {
    buckets_.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      buckets_[key(points[i])].push_back(static_cast<int>(i));
    }
  }

  /// Smallest squared distance from q to any stored point at most tau away;
  /// infinity when none qualifies.
  double nearest_within(const std::vector<Vec3>& points, const Vec3& q,
                        double tau_sq) const {
    double best = std::numeric_limits<double>::infinity();
    const std::int64_t cx = coord(q.x()), cy = coord(q.y()), cz = coord(q.z());
    for (std::int64_t dz = -1; dz <= 1; ++dz) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const auto it = buckets_.find(pack(cx + dx, cy + dy, cz + dz));
          if (it == buckets_.end()) continue;
          for (int idx : it->second) {
            const double d2 = (points[idx] - q).squaredNorm();
            if (d2 <= tau_sq && d2 < best) best = d2;
          }
        }
      }
    }
    return best;
  }

 private:
  std::int64_t coord(double v) const {
    return static_cast<std::int64_t>(std::floor(v / cell_));
  }
  static std::uint64_t pack(std::int64_t x, std::int64_t y, std::int64_t z) {
    auto fold = [](std::int64_t v) {
      return static_cast<std::uint64_t>(v + (1ll << 20));
    };
    return (fold(x) << 42) ^ (fold(y) << 21) ^ fold(z);
  }
  std::uint64_t key(const Vec3& p) const {
    return pack(coord(p.x()), coord(p.y()), coord(p.z()));
  }

  double cell_;
  std::unordered_map<std::uint64_t, std::vector<int>> buckets_;
};

}  // namespace detail

/// Symmetric surface agreement between an estimated and a ground-truth point
/// cloud at match radius tau. RMSE accumulates, in ground-truth order, the
/// nearest-match distances of the matched GT points.
inline ShapeMetrics shape_metrics(const std::vector<Vec3>& estimated,
                                  const std::vector<Vec3>& ground_truth,
                                  double tau) {
  if (estimated.empty() || ground_truth.empty()) {
    throw std::invalid_argument("shape metrics need non-empty point clouds");
  }
  if (tau <= 0.0) throw std::invalid_argument("match radius must be positive");

  const double tau_sq = tau * tau;
  ShapeMetrics m;
  m.tau = tau;

  const detail::PointHash est_hash(estimated, tau);
  double sq_sum = 0.0;
  int matched = 0;
  for (const Vec3& g : ground_truth) {
    const double d2 = est_hash.nearest_within(estimated, g, tau_sq);
    if (d2 <= tau_sq) {
      ++matched;
      sq_sum += d2;
    }
  }
  m.matched = matched;
  m.completeness = double(matched) / double(ground_truth.size());
  m.rmse = matched > 0 ? std::sqrt(sq_sum / matched) : 0.0;

  const detail::PointHash gt_hash(ground_truth, tau);
  int est_matched = 0;
  for (const Vec3& e : estimated) {
    if (gt_hash.nearest_within(ground_truth, e, tau_sq) <= tau_sq) ++est_matched;
  }
  m.accuracy = double(est_matched) / double(estimated.size());

  m.f1 = (m.completeness + m.accuracy) > 0.0
             ? 2.0 * m.completeness * m.accuracy / (m.completeness + m.accuracy)
             : 0.0;
  return m;
}

/// Extracts the zero level set of a grid as points on sign-changing edges
/// between neighboring voxel centers, linearly interpolated, then maps them
/// through obj_to_cam.
inline std::vector<Vec3> surface_point_cloud(const SdfGrid& grid,
                                             const Pose& obj_to_cam) {
  std::vector<Vec3> cloud;
  const auto push_crossing = [&](int i, int j, int k, int axis) {
    const int i2 = i + (axis == 0), j2 = j + (axis == 1), k2 = k + (axis == 2);
    const double a = grid.at(i, j, k);
    const double b = grid.at(i2, j2, k2);
    if ((a > 0.0) == (b > 0.0)) return;
    const double t = a / (a - b);
    Vec3 p = grid.voxel_center(i, j, k);
    p[axis] += t * grid.voxel_size;
    cloud.push_back(obj_to_cam.apply(p));
  };

  for (int k = 0; k < grid.dims.z(); ++k) {
    for (int j = 0; j < grid.dims.y(); ++j) {
      for (int i = 0; i < grid.dims.x(); ++i) {
        if (i + 1 < grid.dims.x()) push_crossing(i, j, k, 0);
        if (j + 1 < grid.dims.y()) push_crossing(i, j, k, 1);
        if (k + 1 < grid.dims.z()) push_crossing(i, j, k, 2);
      }
    }
  }
  return cloud;
}

}  // namespace shapefit
