#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "shapefit/geometry.hpp"
#include "shapefit/image.hpp"
#include "shapefit/sdf_grid.hpp"
#include "shapefit/shape_model.hpp"
#include "shapefit/types.hpp"

namespace shapefit {

struct PhotometricParams {
  double huber_gamma = 0.03;  // transition point of the robust cost
  double grad_weight_c = 0.2; // gradient-dependent down-weighting constant
  int pattern_size = 8;       // residual pattern: 1, 5 or 8 pixels
  RaycastOptions raycast;
};

/// Residual pattern offsets around the host pixel: the center, its
/// 4-neighborhood, and three spread pixels.
inline const std::vector<Vec2>& patch_pattern(int size) {
  static const std::vector<Vec2> one = {{0, 0}};
  static const std::vector<Vec2> five = {{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}};
  static const std::vector<Vec2> eight = {{0, 0},  {-1, 0}, {1, 0},  {0, -1},
                                          {0, 1},  {-1, -1}, {1, -1}, {0, 2}};
  switch (size) {
    case 1: return one;
    case 5: return five;
    case 8: return eight;
    default: throw std::invalid_argument("pattern size must be 1, 5 or 8");
  }
}

/// Huber cost and the matching reweighting factor: cost(r) = r^2 inside the
/// quadratic region and gamma * (2|r| - gamma) outside; weight * r^2 has the
/// same gradient as the cost at the linearization point.
struct HuberResult {
  double cost = 0.0;
  double weight = 1.0;
};

inline HuberResult huber(double r, double gamma) {
  const double a = std::abs(r);
  if (a <= gamma) return {r * r, 1.0};
  return {gamma * (2.0 * a - gamma), gamma / a};
}

/// Down-weights residuals hosted at pixels with strong image gradient.
inline double gradient_weight(const Vec2& grad, double c) {
  const double c2 = c * c;
  return c2 / (c2 + grad.squaredNorm());
}

/// Transfers a left-image pixel into the right image through a fronto-parallel
/// depth: backproject at z-depth d, move through the rig, reproject. Returns
/// nothing when the point lands behind the right camera.
inline std::optional<Vec2> warp_pixel(const StereoRig& rig, const Vec2& pixel,
                                      double depth) {
  if (depth <= 0.0) return std::nullopt;
  const Vec3 xl = backproject(rig.left, pixel, depth);
  const Vec3 xr = rig.left_to_right.apply(xl);
  if (xr.z() <= 1e-9) return std::nullopt;
  return project(rig.right, xr);
}

struct PatchPixelTerm {
  Vec2 pixel = Vec2::Zero();      // left-image location
  Vec2 warped = Vec2::Zero();     // right-image location
  double residual = 0.0;
  double huber_cost = 0.0;
  double huber_weight = 1.0;
  RowVecX jacobian;               // 1 x (6 + K)
};

struct PhotoResidual {
  bool valid = false;
  RayHit hit;
  double depth_ray = 0.0;     // distance along the viewing ray
  double depth_z = 0.0;       // camera-frame z of the hit
  double grad_weight = 1.0;   // host-pixel gradient weight
  std::vector<PatchPixelTerm> terms;
};

/// Depth sensitivity at a surface hit: how the ray depth reacts to a change of
/// the field along the pose and shape directions. Derived from the implicit
/// surface condition, the depth moves by -d(phi)/cos(theta) per unit change of
/// the normalized field, with theta the angle between ray and surface normal.
/// The clamped normal_cos keeps grazing hits bounded.
inline RowVecX depth_sensitivity(const RayHit& hit, const Vec3& dir_obj,
                                 const ShapeModel& model) {
  const int K = model.num_components();
  RowVecX dd = RowVecX::Zero(6 + K);
  const double grad_norm = hit.grad.norm();
  if (grad_norm < 1e-12) return dd;
  const double sign = hit.grad.dot(dir_obj) >= 0.0 ? 1.0 : -1.0;
  const double denom = sign * grad_norm * hit.normal_cos;

  for (int k = 0; k < 6; ++k) {
    dd(k) = -hit.grad.dot(apply_generator(k, hit.point_object)) / denom;
  }
  const VecX basis = basis_values_at(model, hit.point_object);
  for (int k = 0; k < K; ++k) dd(6 + k) = -basis[k] / denom;
  return dd;
}

/// Evaluates the stereo photometric residual for one host pixel: raycasts the
/// decoded shape through the pixel, warps the whole residual pattern with the
/// host depth and differences right against left intensities. Pattern pixels
/// that leave either image or the right camera's frustum are dropped.
inline PhotoResidual evaluate_photometric(const SdfGrid& grid,
                                          const ShapeModel& model,
                                          const Pose& cam_to_obj,
                                          const StereoRig& rig,
                                          const GrayImage& left,
                                          const GrayImage& right,
                                          const Vec2& pixel,
                                          const PhotometricParams& params,
                                          bool with_jacobian = true) {
  PhotoResidual out;
  const Vec3 dir_cam = pixel_ray(rig.left, pixel);
  const Vec3 dir_obj = cam_to_obj.rotation * dir_cam;
  const Vec3 origin_obj = cam_to_obj.translation;

  const auto hit = raycast(grid, origin_obj, dir_obj, params.raycast);
  if (!hit) return out;
  out.hit = *hit;
  out.depth_ray = hit->depth;
  out.depth_z = hit->depth * dir_cam.z();
  if (out.depth_z <= 0.0) return out;
  out.grad_weight = gradient_weight(
      left.pixel_gradient(int(std::lround(pixel.x())), int(std::lround(pixel.y()))),
      params.grad_weight_c);

  RowVecX dd;
  if (with_jacobian) {
    // z-depth = ray depth * dir_cam.z for a fixed pixel.
    dd = dir_cam.z() * depth_sensitivity(*hit, dir_obj, model);
  }

  const Mat3 R_lr = rig.left_to_right.rotation;
  const Vec3 t_lr = rig.left_to_right.translation;
  const int K = model.num_components();

  for (const Vec2& offset : patch_pattern(params.pattern_size)) {
    const Vec2 p = pixel + offset;
    if (!left.contains(p.x(), p.y())) continue;

    const Vec3 v = R_lr * Vec3((p.x() - rig.left.cu) / rig.left.fu,
                               (p.y() - rig.left.cv) / rig.left.fv, 1.0);
    const Vec3 xr = out.depth_z * v + t_lr;
    if (xr.z() <= 1e-9) continue;
    const Vec2 warped = project(rig.right, xr);
    if (!right.contains(warped.x(), warped.y(), 1.0)) continue;

    PatchPixelTerm term;
    term.pixel = p;
    term.warped = warped;
    term.residual = right.sample(warped.x(), warped.y()) - left.sample(p.x(), p.y());
    const HuberResult h = huber(term.residual, params.huber_gamma);
    term.huber_cost = h.cost;
    term.huber_weight = h.weight;

    if (with_jacobian) {
      const double z2 = xr.z() * xr.z();
      const Vec2 dwarp_dd(rig.right.fu * (v.x() * xr.z() - xr.x() * v.z()) / z2,
                          rig.right.fv * (v.y() * xr.z() - xr.y() * v.z()) / z2);
      const Vec2 img_grad = right.gradient(warped.x(), warped.y());
      term.jacobian = (img_grad.dot(dwarp_dd)) * dd;
    } else {
      term.jacobian = RowVecX::Zero(6 + K);
    }
    out.terms.push_back(std::move(term));
  }

  out.valid = !out.terms.empty();
  return out;
}

}  // namespace shapefit
