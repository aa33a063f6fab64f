#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "shapefit/types.hpp"

namespace shapefit {

/// Dense voxel field storing a signed distance function sampled at voxel
/// centers, laid out x-fastest. Values are positive inside the surface and
/// negative outside; the zero level set is the surface itself.
///
/// origin is the object-frame position of voxel (0,0,0)'s center, so the
/// interpolable region spans [origin, origin + (dims - 1) * voxel_size].
struct SdfGrid {
  Eigen::Vector3i dims = Eigen::Vector3i::Zero();
  Vec3 origin = Vec3::Zero();
  double voxel_size = 0.0;
  std::vector<double> values;

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims.x()) *
               (static_cast<std::size_t>(j) +
                static_cast<std::size_t>(dims.y()) * static_cast<std::size_t>(k));
  }

  double at(int i, int j, int k) const { return values[index(i, j, k)]; }
  double& at(int i, int j, int k) { return values[index(i, j, k)]; }

  Vec3 voxel_center(int i, int j, int k) const {
    return origin + voxel_size * Vec3(i, j, k);
  }

  Vec3 interp_min() const { return origin; }
  Vec3 interp_max() const {
    return origin + voxel_size * (dims.cast<double>() - Vec3::Ones());
  }

  bool valid() const {
    return dims.minCoeff() >= 2 && voxel_size > 0.0 &&
           values.size() == static_cast<std::size_t>(dims.x()) * dims.y() * dims.z();
  }
};

inline SdfGrid make_grid(const Eigen::Vector3i& dims, const Vec3& origin,
                         double voxel_size) {
  if (dims.minCoeff() < 2 || voxel_size <= 0.0) {
    throw std::invalid_argument("grid needs at least 2 voxels per axis and a positive voxel size");
  }
  SdfGrid g;
  g.dims = dims;
  g.origin = origin;
  g.voxel_size = voxel_size;
  g.values.assign(static_cast<std::size_t>(dims.x()) * dims.y() * dims.z(), 0.0);
  return g;
}

/// Cell location plus interpolation fractions for one query point. Reusable
/// across several grids with identical geometry (mean and basis grids of a
/// shape model), so the corner weights are computed once per point.
struct TrilinearCell {
  int i = 0, j = 0, k = 0;        // base voxel of the enclosing cell
  double fx = 0, fy = 0, fz = 0;  // fractions in [0,1] within the cell
  bool in_bounds = false;         // query inside the interpolable region
};

inline TrilinearCell locate(const SdfGrid& g, const Vec3& x) {
  TrilinearCell c;
  const Vec3 local = (x - g.origin) / g.voxel_size;
  c.in_bounds = true;
  const double lim[3] = {double(g.dims.x() - 1), double(g.dims.y() - 1),
                         double(g.dims.z() - 1)};
  int idx[3];
  double frac[3];
  for (int a = 0; a < 3; ++a) {
    double l = local[a];
    if (l < 0.0 || l > lim[a]) c.in_bounds = false;
    l = std::clamp(l, 0.0, lim[a]);
    int i0 = std::min(static_cast<int>(std::floor(l)), g.dims[a] - 2);
    idx[a] = i0;
    frac[a] = l - i0;
  }
  c.i = idx[0];
  c.j = idx[1];
  c.k = idx[2];
  c.fx = frac[0];
  c.fy = frac[1];
  c.fz = frac[2];
  return c;
}

inline double sample_at(const SdfGrid& g, const TrilinearCell& c) {
  const double c000 = g.at(c.i, c.j, c.k);
  const double c100 = g.at(c.i + 1, c.j, c.k);
  const double c010 = g.at(c.i, c.j + 1, c.k);
  const double c110 = g.at(c.i + 1, c.j + 1, c.k);
  const double c001 = g.at(c.i, c.j, c.k + 1);
  const double c101 = g.at(c.i + 1, c.j, c.k + 1);
  const double c011 = g.at(c.i, c.j + 1, c.k + 1);
  const double c111 = g.at(c.i + 1, c.j + 1, c.k + 1);
  // (1-f)a + fb is exact at both cell edges, so values at voxel centers
  // reproduce the stored field bit for bit, including on the far faces where
  // the clamp leaves a fraction of exactly one.
  const double c00 = (1.0 - c.fx) * c000 + c.fx * c100;
  const double c10 = (1.0 - c.fx) * c010 + c.fx * c110;
  const double c01 = (1.0 - c.fx) * c001 + c.fx * c101;
  const double c11 = (1.0 - c.fx) * c011 + c.fx * c111;
  const double c0 = (1.0 - c.fy) * c00 + c.fy * c10;
  const double c1 = (1.0 - c.fy) * c01 + c.fy * c11;
  return (1.0 - c.fz) * c0 + c.fz * c1;
}

/// Gradient of the trilinear interpolant itself, in field units per meter.
inline Vec3 gradient_at(const SdfGrid& g, const TrilinearCell& c) {
  const double c000 = g.at(c.i, c.j, c.k);
  const double c100 = g.at(c.i + 1, c.j, c.k);
  const double c010 = g.at(c.i, c.j + 1, c.k);
  const double c110 = g.at(c.i + 1, c.j + 1, c.k);
  const double c001 = g.at(c.i, c.j, c.k + 1);
  const double c101 = g.at(c.i + 1, c.j, c.k + 1);
  const double c011 = g.at(c.i, c.j + 1, c.k + 1);
  const double c111 = g.at(c.i + 1, c.j + 1, c.k + 1);
  const double gx = (c100 - c000) * (1 - c.fy) * (1 - c.fz) +
                    (c110 - c010) * c.fy * (1 - c.fz) +
                    (c101 - c001) * (1 - c.fy) * c.fz + (c111 - c011) * c.fy * c.fz;
  const double gy = (c010 - c000) * (1 - c.fx) * (1 - c.fz) +
                    (c110 - c100) * c.fx * (1 - c.fz) +
                    (c011 - c001) * (1 - c.fx) * c.fz + (c111 - c101) * c.fx * c.fz;
  const double gz = (c001 - c000) * (1 - c.fx) * (1 - c.fy) +
                    (c101 - c100) * c.fx * (1 - c.fy) +
                    (c011 - c010) * (1 - c.fx) * c.fy + (c111 - c110) * c.fx * c.fy;
  return Vec3(gx, gy, gz) / g.voxel_size;
}

struct GridSample {
  double value = 0.0;
  bool in_bounds = false;
};

/// Trilinear sample. Out-of-bounds queries are clamped to the interpolable
/// region and flagged; callers treat clamped samples as constants with zero
/// derivative.
inline GridSample sample(const SdfGrid& g, const Vec3& x) {
  const TrilinearCell c = locate(g, x);
  return GridSample{sample_at(g, c), c.in_bounds};
}

inline Vec3 gradient(const SdfGrid& g, const Vec3& x) {
  return gradient_at(g, locate(g, x));
}

struct RayHit {
  double depth = 0.0;        // meters along the ray from its origin
  Vec3 point_object = Vec3::Zero();
  Vec3 grad = Vec3::Zero();  // field gradient at the hit point
  double normal_cos = 0.0;   // |<grad/|grad|, dir>|, clamped from below
};

struct RaycastOptions {
  double step_scale = 0.5;     // march step as a fraction of voxel_size
  double surface_tol = 1e-4;   // required |value| at the reported hit
  double cos_min = 0.05;       // floor applied to normal_cos
  int refine_iterations = 10;  // bracketed secant refinement budget
};

/// Intersects a ray with an axis-aligned box, returning the parameter range.
inline bool intersect_aabb(const Vec3& lo, const Vec3& hi, const Vec3& origin,
                           const Vec3& dir, double& t0, double& t1) {
  t0 = 0.0;
  t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dir[a]) < 1e-14) {
      if (origin[a] < lo[a] || origin[a] > hi[a]) return false;
      continue;
    }
    double ta = (lo[a] - origin[a]) / dir[a];
    double tb = (hi[a] - origin[a]) / dir[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t0 <= t1;
}

/// Marches a unit-direction ray through the grid and returns the first
/// crossing from outside (negative) to inside (positive). The crossing is
/// bracketed by fixed steps of step_scale * voxel_size and polished with a
/// bracket-preserving secant rule, which converges far tighter than the
/// reported surface tolerance on smooth fields.
inline std::optional<RayHit> raycast(const SdfGrid& g, const Vec3& origin,
                                     const Vec3& dir,
                                     const RaycastOptions& opts = {}) {
  if (std::abs(dir.norm() - 1.0) > 1e-9) {
    throw std::invalid_argument("raycast requires a unit direction");
  }
  double t0, t1;
  if (!intersect_aabb(g.interp_min(), g.interp_max(), origin, dir, t0, t1)) {
    return std::nullopt;
  }

  const double step = opts.step_scale * g.voxel_size;
  auto value_at = [&](double s) { return sample_at(g, locate(g, origin + s * dir)); };

  double s_prev = t0;
  double v_prev = value_at(s_prev);
  if (v_prev > 0.0) {
    // Ray starts inside the positive region; report the entry point itself.
    RayHit hit;
    hit.depth = s_prev;
    hit.point_object = origin + s_prev * dir;
    hit.grad = gradient(g, hit.point_object);
    const double gn = hit.grad.norm();
    hit.normal_cos = gn > 1e-12 ? std::abs(hit.grad.dot(dir)) / gn : 0.0;
    hit.normal_cos = std::max(hit.normal_cos, opts.cos_min);
    return hit;
  }

  bool bracketed = false;
  double s_cur = s_prev, v_cur = v_prev;
  while (s_prev < t1) {
    s_cur = std::min(s_prev + step, t1);
    v_cur = value_at(s_cur);
    if (v_cur >= 0.0) {
      bracketed = true;
      break;
    }
    if (s_cur >= t1) break;
    s_prev = s_cur;
    v_prev = v_cur;
  }
  if (!bracketed) return std::nullopt;

  // Secant refinement, keeping [lo, hi] a sign bracket.
  double lo = s_prev, v_lo = v_prev;
  double hi = s_cur, v_hi = v_cur;
  double s_hit = hi, v_hit = v_hi;
  for (int it = 0; it < opts.refine_iterations && std::abs(v_hit) > 1e-12; ++it) {
    const double denom = v_hi - v_lo;
    double s_next;
    if (std::abs(denom) < 1e-300) {
      s_next = 0.5 * (lo + hi);
    } else {
      s_next = hi - v_hi * (hi - lo) / denom;
      if (s_next <= lo || s_next >= hi) s_next = 0.5 * (lo + hi);
    }
    const double v_next = value_at(s_next);
    if (v_next >= 0.0) {
      hi = s_next;
      v_hi = v_next;
    } else {
      lo = s_next;
      v_lo = v_next;
    }
    s_hit = s_next;
    v_hit = v_next;
  }
  if (std::abs(v_hit) > opts.surface_tol) {
    // Fall back to the positive end of the bracket; the bracket width is
    // below the surface tolerance whenever refinement stalls on kinks.
    s_hit = hi;
  }

  RayHit hit;
  hit.depth = s_hit;
  hit.point_object = origin + s_hit * dir;
  hit.grad = gradient(g, hit.point_object);
  const double gn = hit.grad.norm();
  hit.normal_cos = gn > 1e-12 ? std::abs(hit.grad.dot(dir)) / gn : 0.0;
  hit.normal_cos = std::max(hit.normal_cos, opts.cos_min);
  return hit;
}

// ---------------------------------------------------------------------------
// Grid file format. Binary layout: magic "SDFG", u32 version, u32 dims[3],
// f64 origin[3], f64 voxel_size, then dims.prod() little-endian f32 values in
// x-fastest order. A whitespace structured-text twin ("sdfg-text") is accepted
// for hand-written fixtures.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("unexpected end of grid stream");
  return v;
}

}  // namespace detail

inline void save_grid(const SdfGrid& g, std::ostream& os) {
  if (!g.valid()) throw std::invalid_argument("cannot save malformed grid");
  os.write("SDFG", 4);
  detail::write_raw<std::uint32_t>(os, 1u);
  for (int a = 0; a < 3; ++a) detail::write_raw<std::uint32_t>(os, g.dims[a]);
  for (int a = 0; a < 3; ++a) detail::write_raw<double>(os, g.origin[a]);
  detail::write_raw<double>(os, g.voxel_size);
  for (double v : g.values) detail::write_raw<float>(os, static_cast<float>(v));
  if (!os) throw std::runtime_error("failed writing grid stream");
}

inline void save_grid(const SdfGrid& g, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  save_grid(g, os);
}

inline SdfGrid load_grid_text(std::istream& is) {
  auto expect_key = [&](const char* key) {
    std::string tok;
    if (!(is >> tok) || tok != key) {
      throw std::runtime_error(std::string("grid text: expected '") + key + "'");
    }
  };
  SdfGrid g;
  expect_key("dims");
  for (int a = 0; a < 3; ++a) {
    if (!(is >> g.dims[a])) throw std::runtime_error("grid text: bad dims");
  }
  expect_key("origin");
  for (int a = 0; a < 3; ++a) {
    if (!(is >> g.origin[a])) throw std::runtime_error("grid text: bad origin");
  }
  expect_key("voxel_size");
  if (!(is >> g.voxel_size)) throw std::runtime_error("grid text: bad voxel_size");
  expect_key("values");
  const std::size_t n = static_cast<std::size_t>(g.dims.x()) * g.dims.y() * g.dims.z();
  g.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(is >> g.values[i])) throw std::runtime_error("grid text: too few values");
  }
  if (!g.valid()) throw std::runtime_error("grid text: malformed grid");
  return g;
}

inline SdfGrid load_grid(std::istream& is) {
  char magic[9] = {0};
  is.read(magic, 4);
  if (!is) throw std::runtime_error("grid stream too short");
  if (std::memcmp(magic, "SDFG", 4) == 0) {
    const auto version = detail::read_raw<std::uint32_t>(is);
    if (version != 1u) throw std::runtime_error("unsupported grid version");
    SdfGrid g;
    for (int a = 0; a < 3; ++a) {
      g.dims[a] = static_cast<int>(detail::read_raw<std::uint32_t>(is));
    }
    for (int a = 0; a < 3; ++a) g.origin[a] = detail::read_raw<double>(is);
    g.voxel_size = detail::read_raw<double>(is);
    const std::size_t n =
        static_cast<std::size_t>(g.dims.x()) * g.dims.y() * g.dims.z();
    g.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      g.values[i] = static_cast<double>(detail::read_raw<float>(is));
    }
    if (!g.valid()) throw std::runtime_error("malformed binary grid");
    return g;
  }
  // Not binary; try the text form (header token "sdfg-text").
  is.seekg(0);
  std::string tok;
  if (!(is >> tok) || tok != "sdfg-text") {
    throw std::runtime_error("unrecognized grid format");
  }
  return load_grid_text(is);
}

inline SdfGrid load_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open grid file: " + path);
  return load_grid(is);
}

inline void save_grid_text(const SdfGrid& g, std::ostream& os) {
  if (!g.valid()) throw std::invalid_argument("cannot save malformed grid");
  os << "sdfg-text\n";
  os << "dims " << g.dims.x() << ' ' << g.dims.y() << ' ' << g.dims.z() << '\n';
  os.precision(17);
  os << "origin " << g.origin.x() << ' ' << g.origin.y() << ' ' << g.origin.z()
     << '\n';
  os << "voxel_size " << g.voxel_size << '\n';
  os << "values\n";
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    os << g.values[i] << ((i + 1) % 8 == 0 ? '\n' : ' ');
  }
  os << '\n';
}

}  // namespace shapefit
