#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "shapefit/geometry.hpp"
#include "shapefit/types.hpp"

namespace shapefit {

/// Row-major grayscale image with intensities in [0, 1]. Pixel centers sit at
/// integer coordinates; the bilinear domain is [0, w-1] x [0, h-1].
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  GrayImage() = default;
  GrayImage(int w, int h, double fill = 0.0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  double at(int x, int y) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  double& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }

  bool contains(double u, double v, double margin = 0.0) const {
    return u >= margin && v >= margin && u <= width - 1 - margin &&
           v <= height - 1 - margin;
  }

  double sample(double u, double v) const {
    const int x0 = std::clamp(static_cast<int>(std::floor(u)), 0, width - 2);
    const int y0 = std::clamp(static_cast<int>(std::floor(v)), 0, height - 2);
    const double fx = std::clamp(u - x0, 0.0, 1.0);
    const double fy = std::clamp(v - y0, 0.0, 1.0);
    // (1-f)a + fb rather than a + f(b-a): exact at both cell edges, which
    // keeps integer coordinates identical to the stored pixels.
    const double top = (1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0);
    const double bot = (1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1);
    return (1.0 - fy) * top + fy * bot;
  }

  // Central-difference gradient at an integer pixel, clamped at the borders.
  Vec2 pixel_gradient(int x, int y) const {
    const int xl = std::max(x - 1, 0), xr = std::min(x + 1, width - 1);
    const int yu = std::max(y - 1, 0), yd = std::min(y + 1, height - 1);
    return Vec2(0.5 * (at(xr, y) - at(xl, y)), 0.5 * (at(x, yd) - at(x, yu)));
  }

  double gradient_magnitude(int x, int y) const { return pixel_gradient(x, y).norm(); }

  /// Exact gradient of the bilinear interpolant at a subpixel location, so
  /// that differentiating sample() numerically reproduces it within a cell.
  Vec2 gradient(double u, double v) const {
    const int x0 = std::clamp(static_cast<int>(std::floor(u)), 0, width - 2);
    const int y0 = std::clamp(static_cast<int>(std::floor(v)), 0, height - 2);
    const double fx = std::clamp(u - x0, 0.0, 1.0);
    const double fy = std::clamp(v - y0, 0.0, 1.0);
    const double du = (1.0 - fy) * (at(x0 + 1, y0) - at(x0, y0)) +
                      fy * (at(x0 + 1, y0 + 1) - at(x0, y0 + 1));
    const double dv = (1.0 - fx) * (at(x0, y0 + 1) - at(x0, y0)) +
                      fx * (at(x0 + 1, y0 + 1) - at(x0 + 1, y0));
    return Vec2(du, dv);
  }
};

/// One rectified stereo observation.
struct StereoFrame {
  GrayImage left;
  GrayImage right;
  StereoRig rig;
};

}  // namespace shapefit
