#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>

#include "shapefit/geometry.hpp"
#include "shapefit/types.hpp"

namespace shapefit {

/// Ground plane n . X + d = 0 in camera coordinates, with the normal pointing
/// up (away from the ground). The translation regularizer is invariant to the
/// (n, d) vs (-n, -d) choice; the rotation regularizer is not, so the upward
/// orientation is part of the contract. n.y() must be nonzero.
struct GroundPlane {
  Vec3 normal = Vec3(0.0, -1.0, 0.0);
  double offset = 1.65;

  /// Signed height query: y coordinate at which the plane passes below a
  /// given (x, z) column.
  double height_at(double x, double z) const {
    if (std::abs(normal.y()) < 1e-9) {
      throw std::invalid_argument("ground plane normal has zero y component");
    }
    return -(normal.x() * x + normal.z() * z + offset) / normal.y();
  }
};

struct PriorResidual {
  double value = 0.0;
  RowVecX jacobian;  // 1 x (6 + K), pose block first
};

/// Residuals z_k / sigma_k penalizing departure from the mean shape. Rows are
/// returned stacked: K x (6 + K) with zeros in the pose block.
inline std::pair<VecX, MatX> shape_prior(const VecX& z, const VecX& sigmas) {
  if (z.size() != sigmas.size()) {
    throw std::invalid_argument("shape code and sigma lengths differ");
  }
  const int K = static_cast<int>(z.size());
  VecX r(K);
  MatX J = MatX::Zero(K, 6 + K);
  for (int k = 0; k < K; ++k) {
    if (sigmas[k] <= 0.0) throw std::invalid_argument("sigmas must be positive");
    r[k] = z[k] / sigmas[k];
    J(k, 6 + k) = 1.0 / sigmas[k];
  }
  return {std::move(r), std::move(J)};
}

/// Penalizes the height of the object origin above or below the ground plane.
/// cam_to_obj is the optimized camera-to-object transform; the residual is
/// expressed through its inverse, whose translation is the object position in
/// camera coordinates.
inline PriorResidual translation_prior(const Pose& cam_to_obj,
                                       const GroundPlane& plane, int K) {
  if (std::abs(plane.normal.y()) < 1e-9) {
    throw std::invalid_argument("ground plane normal has zero y component");
  }
  const Pose obj_to_cam = cam_to_obj.inverse();
  const Vec3& t = obj_to_cam.translation;
  const Vec3& n = plane.normal;

  PriorResidual out;
  out.value = t.y() + (n.x() * t.x() + n.z() * t.z() + plane.offset) / n.y();
  out.jacobian = RowVecX::Zero(6 + K);

  // d t / d xi for a left-multiplied increment on cam_to_obj: the translation
  // of obj_to_cam changes by -(T_oc G_k) column 3; only the translational
  // generators contribute.
  const Eigen::RowVector3d a(n.x() / n.y(), 1.0, n.z() / n.y());
  const Mat4 T_oc = obj_to_cam.matrix();
  const auto& gens = se3_generators();
  for (int k = 0; k < 6; ++k) {
    const Vec3 dt = -(T_oc * gens[k]).block<3, 1>(0, 3);
    out.jacobian(k) = a * dt;
  }
  return out;
}

/// Penalizes tilt of the object's up axis away from the ground normal. The
/// residual vanishes exactly when the negative object y axis, expressed in
/// camera coordinates, matches the plane's upward normal.
inline PriorResidual rotation_prior(const Pose& cam_to_obj,
                                    const GroundPlane& plane, int K) {
  const Vec3& n = plane.normal;

  PriorResidual out;
  out.value = 1.0 + cam_to_obj.rotation.row(1) * n;
  out.jacobian = RowVecX::Zero(6 + K);

  const Mat4 T_co = cam_to_obj.matrix();
  const auto& gens = se3_generators();
  for (int k = 0; k < 6; ++k) {
    const Eigen::RowVector3d row = (gens[k] * T_co).block<1, 3>(1, 0);
    out.jacobian(k) = row * n;
  }
  return out;
}

}  // namespace shapefit
