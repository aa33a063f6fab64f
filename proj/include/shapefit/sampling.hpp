#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "shapefit/geometry.hpp"
#include "shapefit/image.hpp"
#include "shapefit/types.hpp"

namespace shapefit {

/// Inclusive pixel-coordinate bounding box.
struct BBox {
  int u_min = 0, v_min = 0, u_max = -1, v_max = -1;

  int width() const { return u_max - u_min + 1; }
  int height() const { return v_max - v_min + 1; }
  bool empty() const { return width() <= 0 || height() <= 0; }
  int area() const { return empty() ? 0 : width() * height(); }
  bool contains(int u, int v) const {
    return u >= u_min && u <= u_max && v >= v_min && v <= v_max;
  }

  BBox clipped(int image_width, int image_height) const {
    BBox out = *this;
    out.u_min = std::max(out.u_min, 0);
    out.v_min = std::max(out.v_min, 0);
    out.u_max = std::min(out.u_max, image_width - 1);
    out.v_max = std::min(out.v_max, image_height - 1);
    return out;
  }
};

/// One detected instance: mask probabilities for both views and an initial
/// object-to-camera pose.
struct Detection {
  int id = 0;
  BBox bbox;
  GrayImage mask_left;
  GrayImage mask_right;
  Pose init_pose;  // object-to-camera
};

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int w, int h)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

  bool at(int x, int y) const {
    return data[static_cast<std::size_t>(y) * width + x] != 0;
  }
  void set(int x, int y) { data[static_cast<std::size_t>(y) * width + x] = 1; }
};

/// Depth ordering heuristic for instances in one frame: a bbox reaching lower
/// into the image is closer; ties go to the larger box, then the smaller id.
inline bool closer_than(const Detection& a, const Detection& b) {
  if (a.bbox.v_max != b.bbox.v_max) return a.bbox.v_max > b.bbox.v_max;
  if (a.bbox.area() != b.bbox.area()) return a.bbox.area() > b.bbox.area();
  return a.id < b.id;
}

/// Pixels of the target's bbox covered by instances ordered closer. Mask
/// probabilities count as covering above 0.5.
inline BinaryMask occlusion_mask(const std::vector<Detection>& detections,
                                 int target_index, int image_width,
                                 int image_height) {
  const Detection& target = detections[target_index];
  BinaryMask out(image_width, image_height);
  const BBox roi = target.bbox.clipped(image_width, image_height);
  if (roi.empty()) return out;

  for (std::size_t n = 0; n < detections.size(); ++n) {
    if (static_cast<int>(n) == target_index) continue;
    const Detection& other = detections[n];
    if (!closer_than(other, target)) continue;
    for (int v = roi.v_min; v <= roi.v_max; ++v) {
      for (int u = roi.u_min; u <= roi.u_max; ++u) {
        if (other.mask_left.at(u, v) > 0.5) out.set(u, v);
      }
    }
  }
  return out;
}

struct SampledPixel {
  int u = 0;
  int v = 0;
  int round = 0;  // 1: above-threshold pick, 2: coverage fill
};

struct PixelSet {
  std::vector<SampledPixel> pixels;

  std::size_t size() const { return pixels.size(); }
  bool empty() const { return pixels.empty(); }
};

struct SamplingParams {
  int coarse_cell = 32;         // cell size for threshold estimation
  int fine_cell = 8;            // cell size for selection and coverage
  double density = 0.05;        // target fraction of bbox pixels
  double initial_offset = 0.03; // added to the per-cell median gradient
  int max_repasses = 3;
  double min_gradient = 1e-9;   // round-1 picks must carry some gradient
};

/// Two-round gradient-adaptive pixel selection inside a detection bbox.
///
/// Round 1 thresholds the gradient magnitude per coarse cell at the cell's
/// median plus an offset and keeps every pixel above it. Round 2 walks the
/// fine cells and gives each one without a round-1 pick its strongest pixel,
/// so every fine cell that has any admissible pixel stays represented. The
/// offset is re-tuned for at most max_repasses passes to land the total near
/// density * bbox area, then surplus round-1 picks are trimmed weakest-first
/// without ever emptying a fine cell. Occluded pixels are never considered.
/// All ties resolve in row-major pixel order.
inline PixelSet adaptive_sample(const GrayImage& image, const Detection& det,
                                const BinaryMask& occlusion,
                                const SamplingParams& params = {}) {
  PixelSet out;
  const BBox roi = det.bbox.clipped(image.width, image.height);
  if (roi.empty()) return out;

  const int w = roi.width(), h = roi.height();
  const int target = std::max(1, static_cast<int>(std::lround(params.density * w * h)));

  std::vector<double> grad(static_cast<std::size_t>(w) * h, -1.0);  // -1: occluded
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int u = roi.u_min + x, v = roi.v_min + y;
      if (occlusion.width > 0 && occlusion.at(u, v)) continue;
      grad[static_cast<std::size_t>(y) * w + x] = image.gradient_magnitude(u, v);
    }
  }

  const int ccols = (w + params.coarse_cell - 1) / params.coarse_cell;
  const int crows = (h + params.coarse_cell - 1) / params.coarse_cell;
  std::vector<double> cell_median(static_cast<std::size_t>(ccols) * crows,
                                  std::numeric_limits<double>::infinity());
  {
    std::vector<double> bucket;
    for (int cy = 0; cy < crows; ++cy) {
      for (int cx = 0; cx < ccols; ++cx) {
        bucket.clear();
        const int x1 = std::min((cx + 1) * params.coarse_cell, w);
        const int y1 = std::min((cy + 1) * params.coarse_cell, h);
        for (int y = cy * params.coarse_cell; y < y1; ++y) {
          for (int x = cx * params.coarse_cell; x < x1; ++x) {
            const double g = grad[static_cast<std::size_t>(y) * w + x];
            if (g >= 0.0) bucket.push_back(g);
          }
        }
        if (bucket.empty()) continue;
        const std::size_t mid = bucket.size() / 2;
        std::nth_element(bucket.begin(), bucket.begin() + mid, bucket.end());
        cell_median[static_cast<std::size_t>(cy) * ccols + cx] = bucket[mid];
      }
    }
  }

  const int fcols = (w + params.fine_cell - 1) / params.fine_cell;
  const int frows = (h + params.fine_cell - 1) / params.fine_cell;

  std::vector<int> round1;           // flat bbox-local indices
  std::vector<int> fine_count(static_cast<std::size_t>(fcols) * frows, 0);
  auto fine_index = [&](int x, int y) {
    return static_cast<std::size_t>(y / params.fine_cell) * fcols +
           (x / params.fine_cell);
  };

  auto run_round1 = [&](double offset) {
    // The last-resort pass admits every pixel with any measurable gradient,
    // however faint, and lets the trimming stage cut back to the target.
    // Exact-zero pixels stay out even then: a featureless region contributes
    // its one coverage pick per cell and nothing more.
    const bool take_all = std::isinf(offset) && offset < 0.0;
    round1.clear();
    std::fill(fine_count.begin(), fine_count.end(), 0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double g = grad[static_cast<std::size_t>(y) * w + x];
        if (take_all) {
          if (!(g > 0.0)) continue;
        } else {
          if (g < params.min_gradient) continue;
          const double med =
              cell_median[static_cast<std::size_t>(y / params.coarse_cell) * ccols +
                          x / params.coarse_cell];
          if (!(g > med + offset)) continue;
        }
        round1.push_back(y * w + x);
        ++fine_count[fine_index(x, y)];
      }
    }
  };

  auto count_round2 = [&]() {
    int extra = 0;
    for (int fy = 0; fy < frows; ++fy) {
      for (int fx = 0; fx < fcols; ++fx) {
        if (fine_count[static_cast<std::size_t>(fy) * fcols + fx] > 0) continue;
        const int x1 = std::min((fx + 1) * params.fine_cell, w);
        const int y1 = std::min((fy + 1) * params.fine_cell, h);
        bool has_pixel = false;
        for (int y = fy * params.fine_cell; y < y1 && !has_pixel; ++y) {
          for (int x = fx * params.fine_cell; x < x1; ++x) {
            if (grad[static_cast<std::size_t>(y) * w + x] >= 0.0) {
              has_pixel = true;
              break;
            }
          }
        }
        if (has_pixel) ++extra;
      }
    }
    return extra;
  };

  double offset = params.initial_offset;
  run_round1(offset);
  for (int pass = 0; pass < params.max_repasses; ++pass) {
    const int total = static_cast<int>(round1.size()) + count_round2();
    if (total > static_cast<int>(1.2 * target)) {
      offset *= 2.0;
    } else if (total < static_cast<int>(0.8 * target)) {
      // Relax. The last resort drops the threshold below every gradient so
      // that all admissible pixels qualify and trimming takes over.
      offset = (pass + 1 == params.max_repasses)
                   ? -std::numeric_limits<double>::infinity()
                   : offset * 0.25;
    } else {
      break;
    }
    run_round1(offset);
  }

  // Round 2: one strongest pixel for every fine cell round 1 left empty.
  std::vector<int> round2;
  for (int fy = 0; fy < frows; ++fy) {
    for (int fx = 0; fx < fcols; ++fx) {
      if (fine_count[static_cast<std::size_t>(fy) * fcols + fx] > 0) continue;
      const int x1 = std::min((fx + 1) * params.fine_cell, w);
      const int y1 = std::min((fy + 1) * params.fine_cell, h);
      int best = -1;
      double best_g = -1.0;
      for (int y = fy * params.fine_cell; y < y1; ++y) {
        for (int x = fx * params.fine_cell; x < x1; ++x) {
          const double g = grad[static_cast<std::size_t>(y) * w + x];
          if (g > best_g) {  // strict: first pixel wins ties in row-major order
            best_g = g;
            best = y * w + x;
          }
        }
      }
      if (best >= 0) round2.push_back(best);
    }
  }

  // Trim surplus round-1 picks, weakest gradient first, never emptying a cell.
  int total = static_cast<int>(round1.size() + round2.size());
  if (total > target) {
    std::vector<int> order(round1.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const double ga = grad[round1[a]], gb = grad[round1[b]];
      if (ga != gb) return ga < gb;
      return round1[a] > round1[b];  // later row-major pixels trimmed first
    });
    std::vector<char> dropped(round1.size(), 0);
    for (int idx : order) {
      if (total <= target) break;
      const int flat = round1[idx];
      const auto cell = fine_index(flat % w, flat / w);
      if (fine_count[cell] <= 1) continue;
      dropped[idx] = 1;
      --fine_count[cell];
      --total;
    }
    std::vector<int> kept;
    kept.reserve(round1.size());
    for (std::size_t i = 0; i < round1.size(); ++i) {
      if (!dropped[i]) kept.push_back(round1[i]);
    }
    round1.swap(kept);
  }

  out.pixels.reserve(round1.size() + round2.size());
  for (int flat : round1) {
    out.pixels.push_back({roi.u_min + flat % w, roi.v_min + flat / w, 1});
  }
  for (int flat : round2) {
    out.pixels.push_back({roi.u_min + flat % w, roi.v_min + flat / w, 2});
  }
  std::sort(out.pixels.begin(), out.pixels.end(),
            [](const SampledPixel& a, const SampledPixel& b) {
              return a.v != b.v ? a.v < b.v : a.u < b.u;
            });
  return out;
}

}  // namespace shapefit
