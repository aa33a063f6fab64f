#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

#include <Eigen/Core>

#include "shapefit/types.hpp"

namespace shapefit {

/// Rigid-body transform acting on points as X' = R * X + t.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return Pose{}; }

  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }

  Pose inverse() const {
    Pose out;
    out.rotation = rotation.transpose();
    out.translation = -(out.rotation * translation);
    return out;
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  static Pose from_matrix(const Mat4& m) {
    Pose p;
    p.rotation = m.topLeftCorner<3, 3>();
    p.translation = m.topRightCorner<3, 1>();
    return p;
  }
};

/// compose(a, b) applies b first, then a: (a * b)(x) = a(b(x)).
inline Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

/// Twist coordinates [v; w]: elements 0..2 are the translational part,
/// 3..5 the rotational part.
using Twist = Vec6;

struct CameraIntrinsics {
  double fu = 0.0;
  double fv = 0.0;
  double cu = 0.0;
  double cv = 0.0;
};

/// Rectified stereo pair. left_to_right maps left-camera coordinates into the
/// right camera; for a rectified rig its translation is (-baseline, 0, 0).
struct StereoRig {
  CameraIntrinsics left;
  CameraIntrinsics right;
  Pose left_to_right;

  double baseline() const { return -left_to_right.translation.x(); }
};

inline Mat3 skew(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return m;
}

inline Vec3 unskew(const Mat3& m) { return Vec3(m(2, 1), m(0, 2), m(1, 0)); }

/// Basis of infinitesimal rigid motions matching the twist ordering above:
/// G0..G2 unit translations along x, y, z; G3..G5 rotations about x, y, z.
inline const std::array<Mat4, 6>& se3_generators() {
  static const std::array<Mat4, 6> gens = [] {
    std::array<Mat4, 6> g;
    for (auto& m : g) m.setZero();
    g[0](0, 3) = 1.0;
    g[1](1, 3) = 1.0;
    g[2](2, 3) = 1.0;
    g[3](1, 2) = -1.0;
    g[3](2, 1) = 1.0;
    g[4](0, 2) = 1.0;
    g[4](2, 0) = -1.0;
    g[5](0, 1) = -1.0;
    g[5](1, 0) = 1.0;
    return g;
  }();
  return gens;
}

/// Applies generator k to a point in homogeneous form, returning the
/// first three rows of G_k * [X; 1]. Used by the energy Jacobians.
inline Vec3 apply_generator(int k, const Vec3& x) {
  switch (k) {
    case 0: return Vec3(1.0, 0.0, 0.0);
    case 1: return Vec3(0.0, 1.0, 0.0);
    case 2: return Vec3(0.0, 0.0, 1.0);
    case 3: return Vec3(0.0, -x.z(), x.y());
    case 4: return Vec3(x.z(), 0.0, -x.x());
    case 5: return Vec3(-x.y(), x.x(), 0.0);
    default: throw std::invalid_argument("generator index out of range");
  }
}

/// Exponential map from twist coordinates to a rigid transform.
/// Uses Rodrigues' formula with a series fallback below ||w|| = 1e-8;
/// 1 - cos(t) is evaluated as 2 sin^2(t/2) to stay accurate for small angles.
inline Pose se3_exp(const Twist& xi) {
  const Vec3 v = xi.head<3>();
  const Vec3 w = xi.tail<3>();
  const double theta = w.norm();

  Pose out;
  const Mat3 wx = skew(w);
  if (theta < 1e-8) {
    out.rotation = Mat3::Identity() + wx + 0.5 * wx * wx;
    const Mat3 V = Mat3::Identity() + 0.5 * wx + (1.0 / 6.0) * wx * wx;
    out.translation = V * v;
    return out;
  }

  const double st = std::sin(theta);
  const double one_minus_cos = 2.0 * std::sin(0.5 * theta) * std::sin(0.5 * theta);
  const double t2 = theta * theta;
  out.rotation = Mat3::Identity() + (st / theta) * wx + (one_minus_cos / t2) * wx * wx;
  const Mat3 V = Mat3::Identity() + (one_minus_cos / t2) * wx +
                 ((theta - st) / (t2 * theta)) * wx * wx;
  out.translation = V * v;
  return out;
}

/// Logarithm map, inverse of se3_exp. Requires the rotation angle to be
/// bounded away from pi; inputs at or beyond pi - 1e-6 are rejected.
inline Twist se3_log(const Pose& p) {
  const double cos_theta =
      std::clamp(0.5 * (p.rotation.trace() - 1.0), -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  if (theta >= M_PI - 1e-6) {
    throw std::domain_error("rotation angle too close to pi for log map");
  }

  Vec3 w;
  const Vec3 vee = unskew(p.rotation - p.rotation.transpose());
  if (theta < 1e-8) {
    // R - R^T = 2 sin(theta) * skew(axis); sin(theta)/theta -> 1.
    w = 0.5 * vee;
  } else {
    w = (theta / (2.0 * std::sin(theta))) * vee;
  }

  const Mat3 wx = skew(w);
  double beta;  // coefficient of wx^2 in V^{-1}
  if (theta < 1e-4) {
    beta = 1.0 / 12.0 + theta * theta / 720.0;
  } else {
    const double one_minus_cos = 2.0 * std::sin(0.5 * theta) * std::sin(0.5 * theta);
    beta = (1.0 - theta * std::sin(theta) / (2.0 * one_minus_cos)) / (theta * theta);
  }
  const Mat3 V_inv = Mat3::Identity() - 0.5 * wx + beta * wx * wx;

  Twist xi;
  xi.head<3>() = V_inv * p.translation;
  xi.tail<3>() = w;
  return xi;
}

/// Pinhole projection of a camera-frame point onto the image plane.
inline Vec2 project(const CameraIntrinsics& cam, const Vec3& x) {
  if (x.z() <= 0.0) {
    throw std::domain_error("cannot project point behind camera");
  }
  return Vec2(cam.fu * x.x() / x.z() + cam.cu, cam.fv * x.y() / x.z() + cam.cv);
}

/// Inverse projection at a given z-depth (camera-frame z coordinate).
inline Vec3 backproject(const CameraIntrinsics& cam, const Vec2& p, double depth) {
  if (depth <= 0.0) {
    throw std::domain_error("backprojection requires positive depth");
  }
  return Vec3(depth * (p.x() - cam.cu) / cam.fu, depth * (p.y() - cam.cv) / cam.fv,
              depth);
}

/// Unit-length viewing ray through pixel p, in camera coordinates.
inline Vec3 pixel_ray(const CameraIntrinsics& cam, const Vec2& p) {
  return Vec3((p.x() - cam.cu) / cam.fu, (p.y() - cam.cv) / cam.fv, 1.0).normalized();
}

}  // namespace shapefit
