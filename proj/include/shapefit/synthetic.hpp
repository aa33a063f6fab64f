#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "shapefit/geometry.hpp"
#include "shapefit/image.hpp"
#include "shapefit/metrics.hpp"
#include "shapefit/sampling.hpp"
#include "shapefit/sdf_grid.hpp"
#include "shapefit/shape_model.hpp"
#include "shapefit/types.hpp"

namespace shapefit {

// ---------------------------------------------------------------------------
// Analytic shape family. Fields are positive inside, negative outside, built
// from a rounded box body and an ellipsoidal cabin blended with a smooth
// union, then softly truncated to a band around the surface. The smooth
// operations keep the sampled grids differentiable, which the derivative
// suites rely on.
// ---------------------------------------------------------------------------

struct CarShapeSpec {
  double length = 4.2;
  double width = 1.8;
  double height = 1.05;   // body height, ground to shoulder line
  double cabin_length = 2.0;
  double cabin_height = 0.45;   // greenhouse above the shoulder line
  double cabin_offset = -0.25;  // cabin center along x, relative to body center
  double rounding = 0.15;
};

namespace detail {

/// Distance-like value of a rounded box, positive inside. Object frame: the
/// origin sits at the ground contact point, y points down, so the solid spans
/// y in [-height, 0].
inline double rounded_box_inside(const Vec3& p, const Vec3& center,
                                 const Vec3& half, double rounding) {
  const Vec3 q = (p - center).cwiseAbs() - (half - Vec3::Constant(rounding));
  const double outside = q.cwiseMax(0.0).norm();
  const double inside = std::min(q.maxCoeff(), 0.0);
  return rounding - (outside + inside);
}

/// Approximate inside-positive distance of an axis-aligned ellipsoid.
inline double ellipsoid_inside(const Vec3& p, const Vec3& center,
                               const Vec3& radii) {
  const Vec3 q = (p - center).cwiseQuotient(radii);
  const double k = q.norm();
  return (1.0 - k) * radii.minCoeff();
}

inline double smooth_max(double a, double b, double k) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(k * (a - m)) + std::exp(k * (b - m))) / k;
}

inline double soft_truncate(double v, double band) {
  return band * std::tanh(v / band);
}

}  // namespace detail

/// Evaluates the analytic car field at an object-frame point.
inline double car_field(const CarShapeSpec& s, const Vec3& p, double band) {
  const Vec3 body_center(0.0, -0.5 * s.height, 0.0);
  const Vec3 body_half(0.5 * s.length, 0.5 * s.height, 0.5 * s.width);
  const double body = detail::rounded_box_inside(p, body_center, body_half, s.rounding);

  const Vec3 cabin_center(s.cabin_offset, -s.height, 0.0);
  const Vec3 cabin_radii(0.5 * s.cabin_length, s.cabin_height, 0.42 * s.width);
  const double cabin = detail::ellipsoid_inside(p, cabin_center, cabin_radii);

  return detail::soft_truncate(detail::smooth_max(body, cabin, 40.0), band);
}

/// Default object box for the car family: x and z span 5 m, y spans 2.5 m
/// with the origin plane (ground contact) near the bottom.
inline SdfGrid make_car_grid_shell() {
  const double voxel = 5.0 / 60.0;
  SdfGrid g = make_grid(Eigen::Vector3i(60, 30, 60),
                        Vec3(-2.5 + 0.5 * voxel, -2.0 + 0.5 * voxel,
                             -2.5 + 0.5 * voxel),
                        voxel);
  return g;
}

inline SdfGrid sample_car_grid(const CarShapeSpec& spec) {
  SdfGrid g = make_car_grid_shell();
  const double band = 10.0 * g.voxel_size;
  for (int k = 0; k < g.dims.z(); ++k) {
    for (int j = 0; j < g.dims.y(); ++j) {
      for (int i = 0; i < g.dims.x(); ++i) {
        g.at(i, j, k) = car_field(spec, g.voxel_center(i, j, k), band);
      }
    }
  }
  return g;
}

/// Nine-exemplar family spanning length, height and cabin proportions. The
/// overall height (ground to roof) stays at least 0.3 m clear of the box top
/// so every face of the shared grid reads strongly negative; samples clamped
/// to the boundary then carry no occupancy.
inline std::vector<SdfGrid> car_family_exemplars() {
  std::vector<SdfGrid> out;
  const double lengths[3] = {3.6, 4.2, 4.8};
  const double overall[3] = {1.35, 1.5, 1.65};
  for (double L : lengths) {
    for (double T : overall) {
      CarShapeSpec s;
      s.length = L;
      s.height = 0.70 * T;
      s.cabin_length = 0.46 * L;
      s.cabin_height = 0.30 * T;
      s.width = 1.62 + 0.05 * L;
      out.push_back(sample_car_grid(s));
    }
  }
  return out;
}

inline ShapeModel car_family_model(int K) {
  return build_model(car_family_exemplars(), K);
}

// ---------------------------------------------------------------------------
// Stereo rendering
// ---------------------------------------------------------------------------

struct RenderOptions {
  int width = 320;
  int height = 240;
  Vec3 light = Vec3(0.35, -0.75, -0.55).normalized();  // toward the light, camera frame
  double ambient = 0.3;
  double diffuse = 0.7;
  double background = 0.12;
  // Peak-to-peak albedo variation painted onto the surface as a function of
  // the object-space hit point. Real paint and grime give every surface pixel
  // some image gradient; a perfectly constant albedo would leave flat faces
  // and light-averted regions without any, starving gradient-based pixel
  // selection. Being attached to the surface keeps the two views consistent.
  double texture_amplitude = 0.1;
  // Sub-rays per axis used to refine mask pixels on the silhouette rim into
  // coverage fractions. 1 keeps the mask hard, which quantizes the true
  // contour to half a pixel and leaks that staircase into anything fitted
  // against the mask.
  int mask_supersample = 4;
  RaycastOptions raycast;
};

struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> data;  // z-depth; +inf marks a miss

  double at(int x, int y) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  bool finite_at(int x, int y) const { return std::isfinite(at(x, y)); }
};

struct SyntheticScene {
  Pose gt_pose;  // object-to-camera, left camera
  ShapeCode gt_code;
  GrayImage left, right;
  GrayImage mask_left, mask_right;  // 0/1 with coverage fractions on the rim
  DepthMap depth_left;
  std::vector<Vec3> gt_cloud;  // left-camera frame
};

namespace detail {

inline void render_view(const SdfGrid& grid, const Pose& obj_to_cam,
                        const CameraIntrinsics& cam, const RenderOptions& opts,
                        GrayImage& image, GrayImage& mask, DepthMap* depth) {
  image = GrayImage(opts.width, opts.height, opts.background);
  mask = GrayImage(opts.width, opts.height, 0.0);
  if (depth) {
    depth->width = opts.width;
    depth->height = opts.height;
    depth->data.assign(static_cast<std::size_t>(opts.width) * opts.height,
                       std::numeric_limits<double>::infinity());
  }

  const Pose cam_to_obj = obj_to_cam.inverse();
  for (int y = 0; y < opts.height; ++y) {
    for (int x = 0; x < opts.width; ++x) {
      const Vec3 dir_cam = pixel_ray(cam, Vec2(x, y));
      const Vec3 dir_obj = cam_to_obj.rotation * dir_cam;
      const auto hit = raycast(grid, cam_to_obj.translation, dir_obj, opts.raycast);
      if (!hit) continue;

      // Outward surface normal: the field grows toward the inside, so the
      // normal is the negated gradient, mapped into camera coordinates.
      Vec3 n_obj = hit->grad;
      const double gn = n_obj.norm();
      double shade = opts.ambient;
      if (gn > 1e-12) {
        const Vec3 n_cam = obj_to_cam.rotation * (-n_obj / gn);
        shade += opts.diffuse * std::max(0.0, n_cam.dot(opts.light));
      }
      if (opts.texture_amplitude > 0.0) {
        const Vec3& p = hit->point_object;
        const double wave = 0.5 + 0.25 * std::sin(8.3 * p.x() + 5.1 * p.z()) +
                            0.25 * std::sin(11.7 * p.y() + 6.9 * p.x());
        shade *= 1.0 - opts.texture_amplitude * wave;
      }
      image.at(x, y) = std::clamp(shade, 0.0, 1.0);
      mask.at(x, y) = 1.0;
      if (depth) {
        depth->data[static_cast<std::size_t>(y) * opts.width + x] =
            hit->depth * dir_cam.z();
      }
    }
  }

  // Second pass: pixels whose neighborhood straddles the silhouette get a
  // subpixel coverage fraction. Only the rim is re-traced, so the extra cost
  // stays proportional to the contour length.
  if (opts.mask_supersample > 1) {
    const int n = opts.mask_supersample;
    GrayImage refined = mask;
    for (int y = 0; y < opts.height; ++y) {
      for (int x = 0; x < opts.width; ++x) {
        const double center = mask.at(x, y);
        bool rim = false;
        for (int dy = -1; dy <= 1 && !rim; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = x + dx, ny = y + dy;
            if (nx < 0 || ny < 0 || nx >= opts.width || ny >= opts.height)
              continue;
            if (mask.at(nx, ny) != center) {
              rim = true;
              break;
            }
          }
        }
        if (!rim) continue;

        int hits = 0;
        for (int sy = 0; sy < n; ++sy) {
          for (int sx = 0; sx < n; ++sx) {
            const Vec2 sub(x + (sx + 0.5) / n - 0.5, y + (sy + 0.5) / n - 0.5);
            const Vec3 dir_obj = cam_to_obj.rotation * pixel_ray(cam, sub);
            if (raycast(grid, cam_to_obj.translation, dir_obj, opts.raycast)) {
              ++hits;
            }
          }
        }
        refined.at(x, y) = double(hits) / double(n * n);
      }
    }
    mask = std::move(refined);
  }
}

}  // namespace detail

/// Renders both views of a posed shape. The right view is traced
/// independently from the right camera rather than warped from the left, so
/// stereo consistency emerges from geometry alone.
inline SyntheticScene render_scene(const ShapeModel& model, const ShapeCode& z,
                                   const Pose& obj_to_cam, const StereoRig& rig,
                                   const RenderOptions& opts = {}) {
  SyntheticScene scene;
  scene.gt_pose = obj_to_cam;
  scene.gt_code = z;

  const SdfGrid grid = decode(model, z);
  detail::render_view(grid, obj_to_cam, rig.left, opts, scene.left,
                      scene.mask_left, &scene.depth_left);
  const Pose obj_to_right = compose(rig.left_to_right, obj_to_cam);
  detail::render_view(grid, obj_to_right, rig.right, opts, scene.right,
                      scene.mask_right, nullptr);
  scene.gt_cloud = surface_point_cloud(grid, obj_to_cam);
  return scene;
}

/// Tight bbox of a rendered mask, empty (u_max < u_min) when nothing is set.
inline BBox mask_bbox(const GrayImage& mask, double threshold = 0.5,
                      int margin = 0) {
  BBox box;
  box.u_min = mask.width;
  box.v_min = mask.height;
  box.u_max = -1;
  box.v_max = -1;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(x, y) <= threshold) continue;
      box.u_min = std::min(box.u_min, x);
      box.v_min = std::min(box.v_min, y);
      box.u_max = std::max(box.u_max, x);
      box.v_max = std::max(box.v_max, y);
    }
  }
  if (box.u_max < box.u_min) return box;
  box.u_min = std::max(box.u_min - margin, 0);
  box.v_min = std::max(box.v_min - margin, 0);
  box.u_max = std::min(box.u_max + margin, mask.width - 1);
  box.v_max = std::min(box.v_max + margin, mask.height - 1);
  return box;
}

// ---------------------------------------------------------------------------
// Numerical differentiation oracle
// ---------------------------------------------------------------------------

/// Central-difference Jacobian of an arbitrary vector function, one column
/// per parameter with the given per-parameter step.
inline MatX finite_difference_jacobian(
    const std::function<VecX(const VecX&)>& f, const VecX& theta,
    const VecX& steps) {
  if (steps.size() != theta.size()) {
    throw std::invalid_argument("one step per parameter required");
  }
  const VecX f0 = f(theta);
  MatX J(f0.size(), theta.size());
  for (Eigen::Index c = 0; c < theta.size(); ++c) {
    VecX hi = theta, lo = theta;
    hi[c] += steps[c];
    lo[c] -= steps[c];
    J.col(c) = (f(hi) - f(lo)) / (2.0 * steps[c]);
  }
  return J;
}

/// Step vector for a pose-plus-code parameterization: 1e-6 on the six pose
/// increments, 1e-5 on the shape code.
inline VecX default_fd_steps(int K) {
  VecX steps(6 + K);
  steps.head(6).setConstant(1e-6);
  steps.tail(K).setConstant(1e-5);
  return steps;
}

}  // namespace shapefit
