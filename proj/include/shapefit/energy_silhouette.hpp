#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "shapefit/geometry.hpp"
#include "shapefit/sdf_grid.hpp"
#include "shapefit/shape_model.hpp"
#include "shapefit/types.hpp"

namespace shapefit {

struct SilhouetteParams {
  double zeta = 75.0;       // sharpness of the occupancy sigmoid, per meter
  int ray_samples = 32;     // interior samples; the two window ends are added
  double prob_floor = 1e-3; // lower bound on mask probabilities
};

/// Parametric range of a viewing ray that intersects the shape's grid.
struct RayWindow {
  double s_near = 0.0;
  double s_far = -1.0;
  bool valid = false;
};

/// Clips the forward half-ray to the grid's interpolable box, keeping every
/// sample placed inside it interpolable.
inline RayWindow clip_ray_to_grid(const SdfGrid& grid, const Vec3& origin_obj,
                                  const Vec3& dir_obj) {
  RayWindow w;
  double t0, t1;
  if (!intersect_aabb(grid.interp_min(), grid.interp_max(), origin_obj, dir_obj,
                      t0, t1)) {
    return w;
  }
  if (t1 <= t0) return w;
  w.s_near = t0;
  w.s_far = t1;
  w.valid = true;
  return w;
}

/// Same clip against the grid box grown by margin on every side. Used to build
/// windows that stay valid while the pose is being corrected: the extra reach
/// covers the expected motion, and samples landing outside the actual grid
/// clamp to its boundary where the occupancy factor is negligible.
inline RayWindow clip_ray_to_inflated_grid(const SdfGrid& grid, double margin,
                                           const Vec3& origin_obj,
                                           const Vec3& dir_obj) {
  RayWindow w;
  const Vec3 pad = Vec3::Constant(margin);
  double t0, t1;
  if (!intersect_aabb(grid.interp_min() - pad, grid.interp_max() + pad,
                      origin_obj, dir_obj, t0, t1)) {
    return w;
  }
  if (t1 <= t0) return w;
  w.s_near = t0;
  w.s_far = t1;
  w.valid = true;
  return w;
}

struct RaySample {
  double s = 0.0;           // distance along the ray
  Vec3 point_object = Vec3::Zero();
  double phi = 0.0;         // decoded field value (clamped when out of bounds)
  double sigmoid = 0.0;     // 1 / (1 + exp(-zeta * phi))
  bool in_bounds = false;
};

/// One pixel's ray with its occupancy evidence. log_product accumulates the
/// per-sample log factors so the product never underflows.
struct RaySampleSet {
  Vec2 pixel = Vec2::Zero();
  Vec3 dir_cam = Vec3::Zero();   // unit viewing ray in camera coordinates
  Vec3 dir_obj = Vec3::Zero();   // the same ray in object coordinates
  RayWindow window;
  std::vector<RaySample> samples;
  double log_product = 0.0;
  double pi = 0.0;
};

namespace detail {

inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double logistic(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

/// Projects the shape into one pixel: marches uniform samples along the
/// pixel's viewing ray and folds their occupancy factors into
/// pi = 1 - prod_i 1 / (exp(phi_i * zeta) + 1). A ray that misses the grid
/// yields pi = 0 with an empty sample set.
///
/// The sampling window defaults to the current clip of the ray against the
/// grid box. Callers that linearize the residual pass the window explicitly so
/// that sample positions stay fixed in camera space while the pose varies;
/// that is the discretization the closed-form Jacobian differentiates.
inline RaySampleSet pi_project(const SdfGrid& grid, const Pose& cam_to_obj,
                               const CameraIntrinsics& cam, const Vec2& pixel,
                               const SilhouetteParams& params,
                               const RayWindow* window = nullptr) {
  RaySampleSet set;
  set.pixel = pixel;
  set.dir_cam = pixel_ray(cam, pixel);
  set.dir_obj = cam_to_obj.rotation * set.dir_cam;
  const Vec3 origin_obj = cam_to_obj.translation;

  set.window = window ? *window : clip_ray_to_grid(grid, origin_obj, set.dir_obj);
  if (!set.window.valid) return set;

  const int count = params.ray_samples + 2;
  set.samples.reserve(count);
  const double span = set.window.s_far - set.window.s_near;
  double log_product = 0.0;
  for (int i = 0; i < count; ++i) {
    RaySample smp;
    smp.s = set.window.s_near + span * (double(i) / double(count - 1));
    smp.point_object = origin_obj + smp.s * set.dir_obj;
    const GridSample gs = sample(grid, smp.point_object);
    smp.phi = gs.value;
    smp.in_bounds = gs.in_bounds;
    const double x = smp.phi * params.zeta;
    smp.sigmoid = detail::logistic(x);
    log_product += -detail::softplus(x);  // log of 1 / (exp(x) + 1)
    set.samples.push_back(smp);
  }
  set.log_product = log_product;
  set.pi = 1.0 - std::exp(log_product);
  set.pi = std::clamp(set.pi, 0.0, 1.0);
  return set;
}

/// Negative log of the mask agreement pi * p_fg + (1 - pi) * p_bg. The
/// probabilities are floored so the log stays finite.
inline double silhouette_residual(double pi, double p_fg, double p_bg,
                                  double prob_floor) {
  p_fg = std::clamp(p_fg, prob_floor, 1.0);
  p_bg = std::clamp(p_bg, prob_floor, 1.0);
  const double blended = pi * p_fg + (1.0 - pi) * p_bg;
  return std::max(-std::log(blended), 0.0);
}

struct SilhouetteResidual {
  double value = 0.0;
  double pi = 0.0;
  RowVecX jacobian;         // 1 x (6 + K)
  double irls_weight = 0.0; // filled in by the solver
  RaySampleSet samples;
};

/// Derivative of the residual with respect to pose increment and shape code.
/// Out-of-bounds samples hold their clamped value and contribute nothing.
inline RowVecX silhouette_jacobian(const RaySampleSet& set, const SdfGrid& grid,
                                   const ShapeModel& model, double p_fg,
                                   double p_bg, const SilhouetteParams& params) {
  const int K = model.num_components();
  RowVecX J = RowVecX::Zero(6 + K);
  if (set.samples.empty()) return J;

  p_fg = std::clamp(p_fg, params.prob_floor, 1.0);
  p_bg = std::clamp(p_bg, params.prob_floor, 1.0);
  const double blended = set.pi * p_fg + (1.0 - set.pi) * p_bg;
  const double dr_dpi = -(p_fg - p_bg) / blended;
  const double prod = std::exp(set.log_product);

  for (const RaySample& smp : set.samples) {
    if (!smp.in_bounds) continue;
    // d pi / d phi_i = prod * zeta * sigmoid(zeta * phi_i)
    const double dpi_dphi = prod * params.zeta * smp.sigmoid;
    const double common = dr_dpi * dpi_dphi;
    if (common == 0.0) continue;

    const TrilinearCell cell = locate(grid, smp.point_object);
    const Vec3 grad = gradient_at(grid, cell);
    for (int k = 0; k < 6; ++k) {
      J(k) += common * grad.dot(apply_generator(k, smp.point_object));
    }
    for (int k = 0; k < K; ++k) {
      J(6 + k) += common * sample_at(model.basis[k], cell);
    }
  }
  return J;
}

/// Full per-pixel evaluation: projection, residual and Jacobian in one pass.
inline SilhouetteResidual evaluate_silhouette(
    const SdfGrid& grid, const ShapeModel& model, const Pose& cam_to_obj,
    const CameraIntrinsics& cam, const Vec2& pixel, double p_fg, double p_bg,
    const SilhouetteParams& params, bool with_jacobian = true,
    const RayWindow* window = nullptr) {
  SilhouetteResidual out;
  out.samples = pi_project(grid, cam_to_obj, cam, pixel, params, window);
  out.pi = out.samples.pi;
  out.value = silhouette_residual(out.pi, p_fg, p_bg, params.prob_floor);
  if (with_jacobian) {
    out.jacobian = silhouette_jacobian(out.samples, grid, model, p_fg, p_bg, params);
  } else {
    out.jacobian = RowVecX::Zero(6 + model.num_components());
  }
  return out;
}

}  // namespace shapefit
