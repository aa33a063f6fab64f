#pragma once

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "shapefit/sdf_grid.hpp"
#include "shapefit/types.hpp"

namespace shapefit {

/// Low-dimensional linear shape space over SDF grids: a mean grid plus K
/// unit-norm basis grids with the per-component standard deviations of the
/// training set. All grids share dims, origin and voxel_size.
struct ShapeModel {
  SdfGrid mean;
  std::vector<SdfGrid> basis;
  VecX sigmas;

  int num_components() const { return static_cast<int>(basis.size()); }

  bool consistent() const {
    if (!mean.valid()) return false;
    if (sigmas.size() != static_cast<Eigen::Index>(basis.size())) return false;
    for (const auto& b : basis) {
      if (b.dims != mean.dims || b.origin != mean.origin ||
          b.voxel_size != mean.voxel_size) {
        return false;
      }
    }
    return true;
  }
};

/// Shape code: coefficients on the unit-norm basis, in field units.
using ShapeCode = VecX;

/// Materializes mean + sum_k z_k * basis_k as a concrete grid.
inline SdfGrid decode(const ShapeModel& model, const ShapeCode& z) {
  if (z.size() != model.num_components()) {
    throw std::invalid_argument("shape code length does not match model");
  }
  SdfGrid out = model.mean;
  for (int k = 0; k < model.num_components(); ++k) {
    const double zk = z[k];
    const auto& src = model.basis[k].values;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += zk * src[i];
  }
  return out;
}

struct DecodedSample {
  double value = 0.0;
  VecX basis_values;  // interpolated basis grid values at the query point
  bool in_bounds = false;
};

/// Evaluates the decoded field at one point without materializing the grid.
/// The returned basis values double as the derivative of the field value with
/// respect to the shape code.
inline DecodedSample decode_at(const ShapeModel& model, const ShapeCode& z,
                               const Vec3& x) {
  if (z.size() != model.num_components()) {
    throw std::invalid_argument("shape code length does not match model");
  }
  const TrilinearCell cell = locate(model.mean, x);
  DecodedSample out;
  out.in_bounds = cell.in_bounds;
  out.basis_values.resize(model.num_components());
  out.value = sample_at(model.mean, cell);
  for (int k = 0; k < model.num_components(); ++k) {
    out.basis_values[k] = sample_at(model.basis[k], cell);
    out.value += z[k] * out.basis_values[k];
  }
  return out;
}

/// Interpolates only the basis grids at one point (the derivative of the
/// decoded field with respect to the code).
inline VecX basis_values_at(const ShapeModel& model, const Vec3& x) {
  const TrilinearCell cell = locate(model.mean, x);
  VecX out(model.num_components());
  for (int k = 0; k < model.num_components(); ++k) {
    out[k] = sample_at(model.basis[k], cell);
  }
  return out;
}

/// Builds the shape space from exemplar grids with snapshot PCA: the
/// eigendecomposition runs on the N x N Gram matrix of centered exemplars
/// rather than the full voxel-count covariance. Basis grids are normalized to
/// unit Euclidean norm and sigmas hold the sample standard deviations of the
/// training coefficients, sorted descending.
inline ShapeModel build_model(const std::vector<SdfGrid>& exemplars, int K) {
  const int N = static_cast<int>(exemplars.size());
  if (K < 1) throw std::invalid_argument("need at least one component");
  if (N < K + 1) {
    throw std::invalid_argument("too few exemplars for requested component count");
  }
  for (const auto& e : exemplars) {
    if (!e.valid() || e.dims != exemplars[0].dims ||
        e.origin != exemplars[0].origin ||
        e.voxel_size != exemplars[0].voxel_size) {
      throw std::invalid_argument("exemplar grids must share geometry");
    }
  }

  const std::size_t M = exemplars[0].values.size();
  ShapeModel model;
  model.mean = exemplars[0];
  std::fill(model.mean.values.begin(), model.mean.values.end(), 0.0);
  for (const auto& e : exemplars) {
    for (std::size_t i = 0; i < M; ++i) model.mean.values[i] += e.values[i];
  }
  for (std::size_t i = 0; i < M; ++i) model.mean.values[i] /= N;

  MatX centered(M, N);
  for (int n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < M; ++i) {
      centered(i, n) = exemplars[n].values[i] - model.mean.values[i];
    }
  }

  const MatX gram = centered.transpose() * centered;
  Eigen::SelfAdjointEigenSolver<MatX> eig(gram);
  if (eig.info() != Eigen::Success) {
    throw std::runtime_error("eigendecomposition failed");
  }

  // SelfAdjointEigenSolver sorts ascending; walk from the back.
  model.sigmas.resize(K);
  model.basis.reserve(K);
  const double scale = std::max(1.0, eig.eigenvalues().maxCoeff());
  for (int k = 0; k < K; ++k) {
    const int src = N - 1 - k;
    const double lambda = eig.eigenvalues()[src];
    if (lambda <= 1e-12 * scale) {
      throw std::runtime_error("degenerate dataset: not enough shape variation");
    }
    VecX dir = centered * eig.eigenvectors().col(src);
    dir.normalize();
    SdfGrid b = model.mean;
    for (std::size_t i = 0; i < M; ++i) b.values[i] = dir[i];
    model.basis.push_back(std::move(b));
    model.sigmas[k] = std::sqrt(lambda / (N - 1));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Model file format: magic "SFMD", u32 version, u32 component count, u32
// dims[3], f64 origin[3], f64 voxel_size, then the mean grid values, the K
// basis grids and K f64 sigmas. Grid payloads use the same little-endian f32
// x-fastest convention as the grid format.
// ---------------------------------------------------------------------------

inline void save_model(const ShapeModel& model, std::ostream& os) {
  if (!model.consistent()) throw std::invalid_argument("cannot save malformed model");
  os.write("SFMD", 4);
  detail::write_raw<std::uint32_t>(os, 1u);
  detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(model.num_components()));
  for (int a = 0; a < 3; ++a) {
    detail::write_raw<std::uint32_t>(os, model.mean.dims[a]);
  }
  for (int a = 0; a < 3; ++a) detail::write_raw<double>(os, model.mean.origin[a]);
  detail::write_raw<double>(os, model.mean.voxel_size);
  for (double v : model.mean.values) {
    detail::write_raw<float>(os, static_cast<float>(v));
  }
  for (const auto& b : model.basis) {
    for (double v : b.values) detail::write_raw<float>(os, static_cast<float>(v));
  }
  for (int k = 0; k < model.num_components(); ++k) {
    detail::write_raw<double>(os, model.sigmas[k]);
  }
  if (!os) throw std::runtime_error("failed writing model stream");
}

inline void save_model(const ShapeModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  save_model(model, os);
}

inline ShapeModel load_model(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SFMD", 4) != 0) {
    throw std::runtime_error("unrecognized model format");
  }
  const auto version = detail::read_raw<std::uint32_t>(is);
  if (version != 1u) throw std::runtime_error("unsupported model version");
  const int K = static_cast<int>(detail::read_raw<std::uint32_t>(is));

  ShapeModel model;
  for (int a = 0; a < 3; ++a) {
    model.mean.dims[a] = static_cast<int>(detail::read_raw<std::uint32_t>(is));
  }
  for (int a = 0; a < 3; ++a) model.mean.origin[a] = detail::read_raw<double>(is);
  model.mean.voxel_size = detail::read_raw<double>(is);
  const std::size_t M = static_cast<std::size_t>(model.mean.dims.x()) *
                        model.mean.dims.y() * model.mean.dims.z();
  model.mean.values.resize(M);
  for (std::size_t i = 0; i < M; ++i) {
    model.mean.values[i] = static_cast<double>(detail::read_raw<float>(is));
  }
  model.basis.assign(K, model.mean);
  for (int k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < M; ++i) {
      model.basis[k].values[i] = static_cast<double>(detail::read_raw<float>(is));
    }
  }
  model.sigmas.resize(K);
  for (int k = 0; k < K; ++k) model.sigmas[k] = detail::read_raw<double>(is);
  if (!model.consistent()) throw std::runtime_error("malformed model file");
  return model;
}

inline ShapeModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model file: " + path);
  return load_model(is);
}

}  // namespace shapefit
