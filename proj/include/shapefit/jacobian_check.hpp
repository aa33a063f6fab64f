#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "shapefit/energy_photometric.hpp"
#include "shapefit/energy_priors.hpp"
#include "shapefit/energy_silhouette.hpp"
#include "shapefit/geometry.hpp"
#include "shapefit/image.hpp"
#include "shapefit/sdf_grid.hpp"
#include "shapefit/shape_model.hpp"
#include "shapefit/synthetic.hpp"
#include "shapefit/types.hpp"

namespace shapefit {

/// Result of one finite-difference verification family. Relative families
/// measure |analytic - fd| / max(|fd|, floor) where floor keeps near-zero
/// derivatives on an absolute scale; absolute families measure |analytic - fd|.
struct JacobianReport {
  std::string family;
  int configs = 0;       // accepted random configurations
  int comparisons = 0;   // scalar derivative entries compared
  double max_error = 0.0;
  double tolerance = 0.0;
  bool relative = true;
  double seconds = 0.0;
  bool passed = false;
};

namespace jc_detail {

inline double rel_error(double analytic, double fd, double floor) {
  return std::abs(analytic - fd) / std::max(std::abs(fd), floor);
}

/// Smallest distance from a point to any face of the grid's interpolable box.
/// Negative when the point lies outside.
inline double box_clearance(const SdfGrid& g, const Vec3& x) {
  const Vec3 lo = g.interp_min();
  const Vec3 hi = g.interp_max();
  double d = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    d = std::min(d, std::min(x[a] - lo[a], hi[a] - x[a]));
  }
  return d;
}

inline const ShapeModel& shared_model() {
  static const ShapeModel model = car_family_model(3);
  return model;
}

inline Pose random_obj_to_cam(std::mt19937& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double yaw = (2.0 * u01(rng) - 1.0) * M_PI;
  const double pitch = (2.0 * u01(rng) - 1.0) * 0.08;
  const double roll = (2.0 * u01(rng) - 1.0) * 0.08;
  Pose p;
  p.rotation = (Eigen::AngleAxisd(yaw, Vec3::UnitY()) *
                Eigen::AngleAxisd(pitch, Vec3::UnitX()) *
                Eigen::AngleAxisd(roll, Vec3::UnitZ()))
                   .toRotationMatrix();
  p.translation = Vec3((2.0 * u01(rng) - 1.0) * 2.5, 1.3 + 0.6 * u01(rng),
                       7.0 + 6.0 * u01(rng));
  return p;
}

inline VecX random_code(std::mt19937& rng, const VecX& sigmas, double scale) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  VecX z(sigmas.size());
  for (Eigen::Index k = 0; k < z.size(); ++k) {
    z[k] = (2.0 * u01(rng) - 1.0) * scale * sigmas[k];
  }
  return z;
}

/// A point inside the grid box, pulled toward its center so the viewing ray
/// crosses the interpolable region with a comfortable margin.
inline Vec3 random_interior_point(std::mt19937& rng, const SdfGrid& g,
                                  double shrink) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const Vec3 lo = g.interp_min();
  const Vec3 hi = g.interp_max();
  Vec3 x;
  for (int a = 0; a < 3; ++a) {
    const double c = 0.5 * (lo[a] + hi[a]);
    const double half = 0.5 * (hi[a] - lo[a]);
    x[a] = c + (2.0 * u01(rng) - 1.0) * shrink * half;
  }
  return x;
}

/// Deterministic smooth test texture; variant decorrelates the two views.
inline GrayImage synth_texture(int w, int h, int variant) {
  GrayImage img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double u = x, v = y;
      const double val =
          0.5 + 0.17 * std::sin(0.131 * u + 0.7 * variant + 0.4 * std::sin(0.041 * v)) +
          0.13 * std::cos(0.093 * v - 0.3 * variant + 0.6 * std::sin(0.057 * u)) +
          0.08 * std::sin(0.231 * u + 0.187 * v + 1.1 * variant);
      img.at(x, y) = std::clamp(val, 0.02, 0.98);
    }
  }
  return img;
}

inline double fractional_clearance(double coord) {
  const double f = coord - std::floor(coord);
  return std::min(f, 1.0 - f);
}

}  // namespace jc_detail

/// Silhouette residual derivative against central differences. The sampling
/// window along each ray is held fixed while pose and code are perturbed,
/// which is exactly the discretization the closed-form derivative describes;
/// configurations whose samples sit near the grid boundary are rejected so the
/// out-of-bounds clamp never flips within a perturbation.
inline JacobianReport check_silhouette_jacobian(int configs, unsigned seed) {
  const auto start = std::chrono::steady_clock::now();
  JacobianReport rep;
  rep.family = "silhouette";
  rep.tolerance = 1e-3;
  rep.relative = true;
  const double floor = 1e-6 / rep.tolerance;

  const ShapeModel& model = jc_detail::shared_model();
  const int K = model.num_components();
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const CameraIntrinsics cam{700.0, 700.0, 320.0, 240.0};
  const SilhouetteParams params;

  int attempts = 0;
  const int max_attempts = configs * 200;
  while (rep.configs < configs && attempts < max_attempts) {
    ++attempts;
    const Pose obj_to_cam = jc_detail::random_obj_to_cam(rng);
    const Pose cam_to_obj = obj_to_cam.inverse();
    const VecX z = jc_detail::random_code(rng, model.sigmas, 1.5);
    const SdfGrid grid = decode(model, z);

    const Vec3 target = jc_detail::random_interior_point(rng, grid, 0.75);
    const Vec3 x_cam = obj_to_cam.apply(target);
    if (x_cam.z() < 1.0) continue;
    const Vec2 pixel = project(cam, x_cam);

    const Vec3 dir_obj = cam_to_obj.rotation * pixel_ray(cam, pixel);
    RayWindow win = clip_ray_to_grid(grid, cam_to_obj.translation, dir_obj);
    if (!win.valid) continue;
    const double span = win.s_far - win.s_near;
    if (span < 0.3) continue;
    win.s_near += 0.05 * span;
    win.s_far -= 0.05 * span;

    const double p_fg = 0.05 + 0.9 * u01(rng);
    const double p_bg = 0.05 + 0.9 * u01(rng);

    const RaySampleSet base = pi_project(grid, cam_to_obj, cam, pixel, params, &win);
    bool usable = !base.samples.empty();
    for (const RaySample& s : base.samples) {
      if (!s.in_bounds || jc_detail::box_clearance(grid, s.point_object) < 1e-3) {
        usable = false;
        break;
      }
    }
    if (!usable) continue;

    const RowVecX J = silhouette_jacobian(base, grid, model, p_fg, p_bg, params);

    auto residual_at = [&](const Pose& pose, const SdfGrid& g) {
      const RaySampleSet s = pi_project(g, pose, cam, pixel, params, &win);
      return silhouette_residual(s.pi, p_fg, p_bg, params.prob_floor);
    };

    const double h_pose = 1e-6;
    for (int k = 0; k < 6; ++k) {
      Twist d = Twist::Zero();
      d[k] = h_pose;
      const double rp = residual_at(compose(se3_exp(d), cam_to_obj), grid);
      d[k] = -h_pose;
      const double rm = residual_at(compose(se3_exp(d), cam_to_obj), grid);
      const double fd = (rp - rm) / (2.0 * h_pose);
      rep.max_error = std::max(rep.max_error, jc_detail::rel_error(J(k), fd, floor));
      ++rep.comparisons;
    }
    const double h_code = 1e-5;
    for (int k = 0; k < K; ++k) {
      VecX zp = z, zm = z;
      zp[k] += h_code;
      zm[k] -= h_code;
      const double rp = residual_at(cam_to_obj, decode(model, zp));
      const double rm = residual_at(cam_to_obj, decode(model, zm));
      const double fd = (rp - rm) / (2.0 * h_code);
      rep.max_error =
          std::max(rep.max_error, jc_detail::rel_error(J(6 + k), fd, floor));
      ++rep.comparisons;
    }
    ++rep.configs;
  }

  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              start)
                    .count();
  rep.passed = rep.configs == configs && rep.max_error <= rep.tolerance;
  return rep;
}

/// Photometric residual derivative against central differences. Configurations
/// are filtered so the perturbed evaluations stay on the same smooth branch:
/// a well-conditioned surface hit away from the grid boundary, the full
/// residual pattern inside both images, and warped pixels clear of bilinear
/// cell edges.
inline JacobianReport check_photometric_jacobian(int configs, unsigned seed) {
  const auto start = std::chrono::steady_clock::now();
  JacobianReport rep;
  rep.family = "photometric";
  rep.tolerance = 5e-3;
  rep.relative = true;
  const double floor = 1e-6 / rep.tolerance;

  const ShapeModel& model = jc_detail::shared_model();
  const int K = model.num_components();
  std::mt19937 rng(seed);

  const int w = 640, h = 480;
  const GrayImage left = jc_detail::synth_texture(w, h, 0);
  const GrayImage right = jc_detail::synth_texture(w, h, 1);
  StereoRig rig;
  rig.left = rig.right = CameraIntrinsics{700.0, 700.0, 319.5, 239.5};
  rig.left_to_right = Pose::identity();
  rig.left_to_right.translation = Vec3(-0.4706, 0.0, 0.0);

  PhotometricParams params;
  params.raycast.refine_iterations = 16;
  const auto& pattern = patch_pattern(params.pattern_size);

  int attempts = 0;
  const int max_attempts = configs * 400;
  while (rep.configs < configs && attempts < max_attempts) {
    ++attempts;
    const Pose obj_to_cam = jc_detail::random_obj_to_cam(rng);
    const Pose cam_to_obj = obj_to_cam.inverse();
    const VecX z = jc_detail::random_code(rng, model.sigmas, 1.2);
    const SdfGrid grid = decode(model, z);

    const Vec3 target = jc_detail::random_interior_point(rng, grid, 0.6);
    const Vec3 x_cam = obj_to_cam.apply(target);
    if (x_cam.z() < 1.0) continue;
    Vec2 pixel;
    try {
      pixel = project(rig.left, x_cam);
    } catch (const std::domain_error&) {
      continue;
    }
    pixel = Vec2(std::round(pixel.x()), std::round(pixel.y()));
    if (!(pixel.x() >= 8 && pixel.x() <= w - 9 && pixel.y() >= 8 &&
          pixel.y() <= h - 9)) {
      continue;
    }

    const PhotoResidual base = evaluate_photometric(
        grid, model, cam_to_obj, rig, left, right, pixel, params, true);
    if (!base.valid || base.terms.size() != pattern.size()) continue;
    if (base.hit.normal_cos < 0.3) continue;
    if (base.depth_z < 1.0) continue;
    if (std::abs(sample(grid, base.hit.point_object).value) > 1e-12) continue;
    if (jc_detail::box_clearance(grid, base.hit.point_object) < 5e-3) continue;

    // The march must approach the surface from clearly outside; entering the
    // box already inside the shape would pin the hit to the box face instead.
    const Vec3 dir_obj = cam_to_obj.rotation * pixel_ray(rig.left, pixel);
    const RayWindow win = clip_ray_to_grid(grid, cam_to_obj.translation, dir_obj);
    if (!win.valid) continue;
    if (sample(grid, cam_to_obj.translation + win.s_near * dir_obj).value > -0.05) {
      continue;
    }

    bool usable = true;
    for (const PatchPixelTerm& term : base.terms) {
      if (term.pixel.x() < 2 || term.pixel.x() > w - 3 || term.pixel.y() < 2 ||
          term.pixel.y() > h - 3) {
        usable = false;
        break;
      }
      if (term.warped.x() < 2 || term.warped.x() > w - 3 ||
          term.warped.y() < 2 || term.warped.y() > h - 3) {
        usable = false;
        break;
      }
      // The rectified warp moves only horizontally; the vertical coordinate
      // sits exactly on the integer pixel row and never changes under the
      // probe, so only the horizontal position must stay away from the
      // bilinear kinks at integer columns.
      if (jc_detail::fractional_clearance(term.warped.x()) < 1e-3) {
        usable = false;
        break;
      }
    }
    if (!usable) continue;

    auto residuals_at = [&](const Pose& pose,
                            const SdfGrid& g) -> std::optional<VecX> {
      const PhotoResidual r = evaluate_photometric(g, model, pose, rig, left,
                                                   right, pixel, params, false);
      if (!r.valid || r.terms.size() != pattern.size()) return std::nullopt;
      VecX out(r.terms.size());
      for (std::size_t i = 0; i < r.terms.size(); ++i) {
        out[i] = r.terms[i].residual;
      }
      return out;
    };

    MatX fd(pattern.size(), 6 + K);
    usable = true;
    const double h_pose = 1e-6;
    for (int k = 0; k < 6 && usable; ++k) {
      Twist d = Twist::Zero();
      d[k] = h_pose;
      const auto rp = residuals_at(compose(se3_exp(d), cam_to_obj), grid);
      d[k] = -h_pose;
      const auto rm = residuals_at(compose(se3_exp(d), cam_to_obj), grid);
      if (!rp || !rm) {
        usable = false;
        break;
      }
      fd.col(k) = (*rp - *rm) / (2.0 * h_pose);
    }
    const double h_code = 1e-5;
    for (int k = 0; k < K && usable; ++k) {
      VecX zp = z, zm = z;
      zp[k] += h_code;
      zm[k] -= h_code;
      const auto rp = residuals_at(cam_to_obj, decode(model, zp));
      const auto rm = residuals_at(cam_to_obj, decode(model, zm));
      if (!rp || !rm) {
        usable = false;
        break;
      }
      fd.col(6 + k) = (*rp - *rm) / (2.0 * h_code);
    }
    if (!usable) continue;

    for (std::size_t i = 0; i < base.terms.size(); ++i) {
      for (int c = 0; c < 6 + K; ++c) {
        rep.max_error =
            std::max(rep.max_error, jc_detail::rel_error(base.terms[i].jacobian(c),
                                                         fd(int(i), c), floor));
        ++rep.comparisons;
      }
    }
    ++rep.configs;
  }

  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              start)
                    .count();
  rep.passed = rep.configs == configs && rep.max_error <= rep.tolerance;
  return rep;
}

/// Shape prior rows against central differences over the code, plus the
/// requirement that the pose block is identically zero.
inline JacobianReport check_shape_prior_jacobian(int configs, unsigned seed) {
  const auto start = std::chrono::steady_clock::now();
  JacobianReport rep;
  rep.family = "shape-prior";
  rep.tolerance = 1e-6;
  rep.relative = false;

  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int K = 3;
  const double h = 1e-6;

  for (int c = 0; c < configs; ++c) {
    VecX sigmas(K), z(K);
    for (int k = 0; k < K; ++k) {
      sigmas[k] = 0.1 + 1.9 * u01(rng);
      z[k] = (2.0 * u01(rng) - 1.0) * 2.0 * sigmas[k];
    }
    const auto [r, J] = shape_prior(z, sigmas);

    for (int row = 0; row < K; ++row) {
      for (int k = 0; k < 6; ++k) {
        rep.max_error = std::max(rep.max_error, std::abs(J(row, k)));
        ++rep.comparisons;
      }
      for (int k = 0; k < K; ++k) {
        VecX zp = z, zm = z;
        zp[k] += h;
        zm[k] -= h;
        const double fd =
            (shape_prior(zp, sigmas).first[row] - shape_prior(zm, sigmas).first[row]) /
            (2.0 * h);
        rep.max_error = std::max(rep.max_error, std::abs(J(row, 6 + k) - fd));
        ++rep.comparisons;
      }
    }
    ++rep.configs;
  }

  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              start)
                    .count();
  rep.passed = rep.configs == configs && rep.max_error <= rep.tolerance;
  return rep;
}

namespace jc_detail {

inline GroundPlane random_plane(std::mt19937& rng, bool allow_flip) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  GroundPlane plane;
  plane.normal =
      Vec3((2.0 * u01(rng) - 1.0) * 0.15, -1.0, (2.0 * u01(rng) - 1.0) * 0.15)
          .normalized();
  plane.offset = 1.2 + 0.8 * u01(rng);
  if (allow_flip && u01(rng) < 0.5) {
    plane.normal = -plane.normal;
    plane.offset = -plane.offset;
  }
  return plane;
}

template <typename Prior>
inline JacobianReport check_pose_prior(const char* family, int configs,
                                       unsigned seed, bool allow_flip,
                                       Prior&& prior) {
  const auto start = std::chrono::steady_clock::now();
  JacobianReport rep;
  rep.family = family;
  rep.tolerance = 1e-6;
  rep.relative = false;

  std::mt19937 rng(seed);
  const int K = 3;
  const double h = 1e-6;

  for (int c = 0; c < configs; ++c) {
    const Pose cam_to_obj = random_obj_to_cam(rng).inverse();
    const GroundPlane plane = random_plane(rng, allow_flip);
    const PriorResidual res = prior(cam_to_obj, plane, K);

    for (int k = 0; k < 6; ++k) {
      Twist d = Twist::Zero();
      d[k] = h;
      const double rp = prior(compose(se3_exp(d), cam_to_obj), plane, K).value;
      d[k] = -h;
      const double rm = prior(compose(se3_exp(d), cam_to_obj), plane, K).value;
      const double fd = (rp - rm) / (2.0 * h);
      rep.max_error = std::max(rep.max_error, std::abs(res.jacobian(k) - fd));
      ++rep.comparisons;
    }
    for (int k = 0; k < K; ++k) {
      rep.max_error = std::max(rep.max_error, std::abs(res.jacobian(6 + k)));
      ++rep.comparisons;
    }
    ++rep.configs;
  }

  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              start)
                    .count();
  rep.passed = rep.configs == configs && rep.max_error <= rep.tolerance;
  return rep;
}

}  // namespace jc_detail

/// Ground contact regularizer derivative; exercised under both signings of the
/// plane equation, to which the residual is invariant.
inline JacobianReport check_translation_prior_jacobian(int configs,
                                                       unsigned seed) {
  return jc_detail::check_pose_prior(
      "translation-prior", configs, seed, true,
      [](const Pose& p, const GroundPlane& g, int K) {
        return translation_prior(p, g, K);
      });
}

/// Tilt regularizer derivative; the plane keeps its upward orientation, which
/// is part of this residual's contract.
inline JacobianReport check_rotation_prior_jacobian(int configs, unsigned seed) {
  return jc_detail::check_pose_prior(
      "rotation-prior", configs, seed, false,
      [](const Pose& p, const GroundPlane& g, int K) {
        return rotation_prior(p, g, K);
      });
}

/// Runs every verification family with per-family seeds derived from the
/// given one.
inline std::vector<JacobianReport> run_all_jacobian_checks(
    int configs_per_family, unsigned seed) {
  std::vector<JacobianReport> reports;
  reports.push_back(check_silhouette_jacobian(configs_per_family, seed + 1));
  reports.push_back(check_photometric_jacobian(configs_per_family, seed + 2));
  reports.push_back(check_shape_prior_jacobian(configs_per_family, seed + 3));
  reports.push_back(check_translation_prior_jacobian(configs_per_family, seed + 4));
  reports.push_back(check_rotation_prior_jacobian(configs_per_family, seed + 5));
  return reports;
}

}  // namespace shapefit
