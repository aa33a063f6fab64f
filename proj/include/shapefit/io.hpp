#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "shapefit/energy_priors.hpp"
#include "shapefit/energy_silhouette.hpp"
#include "shapefit/geometry.hpp"
#include "shapefit/image.hpp"
#include "shapefit/metrics.hpp"
#include "shapefit/sampling.hpp"
#include "shapefit/solver.hpp"
#include "shapefit/synthetic.hpp"
#include "shapefit/types.hpp"

namespace shapefit {

class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Calibration: projection-matrix lines "P2: <12 numbers>" (left) and
// "P3: <12 numbers>" (right) of a rectified pair. The baseline is recovered
// from the right matrix's x offset as -P3(0,3) / f.
// ---------------------------------------------------------------------------

inline StereoRig parse_calibration(std::istream& is) {
  std::optional<std::array<double, 12>> p2, p3;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag != "P2:" && tag != "P3:") continue;
    std::array<double, 12> vals{};
    for (double& v : vals) {
      if (!(ls >> v)) throw ParseError("calibration: short row for " + tag);
    }
    (tag == "P2:" ? p2 : p3) = vals;
  }
  if (!p2 || !p3) throw ParseError("calibration: need both P2: and P3: rows");

  auto intrinsics = [](const std::array<double, 12>& p) {
    CameraIntrinsics cam;
    cam.fu = p[0];
    cam.fv = p[5];
    cam.cu = p[2];
    cam.cv = p[6];
    return cam;
  };
  StereoRig rig;
  rig.left = intrinsics(*p2);
  rig.right = intrinsics(*p3);
  if (rig.left.fu <= 0.0 || rig.left.fv <= 0.0) {
    throw ParseError("calibration: non-positive focal length");
  }
  const double baseline = -(*p3)[3] / rig.left.fu;
  if (baseline <= 0.0) throw ParseError("calibration: non-positive baseline");
  rig.left_to_right = Pose::identity();
  rig.left_to_right.translation = Vec3(-baseline, 0.0, 0.0);
  return rig;
}

inline StereoRig load_calibration(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open calibration file: " + path);
  return parse_calibration(is);
}

inline void save_calibration(const StereoRig& rig, std::ostream& os) {
  auto row = [&](const char* tag, const CameraIntrinsics& cam, double tx) {
    os << tag << ' ' << detail::fmt(cam.fu) << " 0 " << detail::fmt(cam.cu) << ' '
       << detail::fmt(tx) << " 0 " << detail::fmt(cam.fv) << ' '
       << detail::fmt(cam.cv) << " 0 0 0 1 0\n";
  };
  row("P2:", rig.left, 0.0);
  row("P3:", rig.right, -rig.left.fu * rig.baseline());
}

// ---------------------------------------------------------------------------
// PGM images. Binary P5 and ASCII P2, 8-bit only; intensity v maps to v/255.
// ---------------------------------------------------------------------------

inline GrayImage load_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open image: " + path);

  std::string magic;
  is >> magic;
  if (magic != "P5" && magic != "P2") {
    throw ParseError("unsupported image format in " + path);
  }
  auto next_token = [&]() {
    std::string tok;
    while (is >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(is, rest);
        continue;
      }
      return tok;
    }
    throw ParseError("truncated image header in " + path);
  };
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw ParseError("bad image header in " + path);
  }

  GrayImage img(w, h);
  if (magic == "P5") {
    is.get();  // single whitespace after maxval
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h);
    is.read(reinterpret_cast<char*>(raw.data()), raw.size());
    if (!is) throw ParseError("truncated image data in " + path);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      img.data[i] = double(raw[i]) / maxval;
    }
  } else {
    for (auto& v : img.data) {
      int p;
      if (!(is >> p)) throw ParseError("truncated image data in " + path);
      v = double(p) / maxval;
    }
  }
  return img;
}

inline void save_pgm(const GrayImage& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open for writing: " + path);
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  for (double v : img.data) {
    const int q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    os.put(static_cast<char>(q));
  }
  if (!os) throw ParseError("failed writing image: " + path);
}

/// Maps a probability mask into [floor, 1 - floor] so hard {0, 1} masks keep
/// finite log-likelihoods.
inline void soften_mask(GrayImage& mask, double floor) {
  for (double& v : mask.data) v = std::clamp(v, floor, 1.0 - floor);
}

// ---------------------------------------------------------------------------
// Ground plane: one "nx ny nz d" line (n . X + d = 0, upward normal).
// ---------------------------------------------------------------------------

inline GroundPlane parse_ground_plane(std::istream& is) {
  GroundPlane plane;
  if (!(is >> plane.normal.x() >> plane.normal.y() >> plane.normal.z() >>
        plane.offset)) {
    throw ParseError("ground plane: expected 'nx ny nz d'");
  }
  const double n = plane.normal.norm();
  if (n < 1e-12) throw ParseError("ground plane: zero normal");
  plane.normal /= n;
  plane.offset /= n;
  if (std::abs(plane.normal.y()) < 1e-9) {
    throw ParseError("ground plane: normal must have a y component");
  }
  return plane;
}

inline GroundPlane load_ground_plane(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open plane file: " + path);
  return parse_ground_plane(is);
}

inline void save_ground_plane(const GroundPlane& plane, std::ostream& os) {
  os << detail::fmt(plane.normal.x()) << ' ' << detail::fmt(plane.normal.y())
     << ' ' << detail::fmt(plane.normal.z()) << ' ' << detail::fmt(plane.offset)
     << '\n';
}

// ---------------------------------------------------------------------------
// Detections file: blocks of key/value lines terminated by "end". Mask paths
// are resolved relative to the detections file's directory.
//
//   instance 0
//   bbox 10 20 200 180
//   pose r00 r01 r02 t0 r10 ... (16 numbers, row-major object-to-camera)
//   mask_left masks/inst0_left.pgm
//   mask_right masks/inst0_right.pgm
//   gt_cloud gt/cloud0.xyz          (optional)
//   end
// ---------------------------------------------------------------------------

struct DetectionRecord {
  Detection detection;
  std::string mask_left_path;
  std::string mask_right_path;
  std::string gt_cloud_path;  // empty when absent
};

inline Pose parse_pose16(std::istringstream& ls, const std::string& context) {
  Mat4 m;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      if (!(ls >> m(r, c))) throw ParseError(context + ": pose needs 16 numbers");
    }
  }
  return Pose::from_matrix(m);
}

inline std::vector<DetectionRecord> parse_detections(std::istream& is) {
  std::vector<DetectionRecord> out;
  std::optional<DetectionRecord> cur;
  std::string line;
  int line_no = 0;
  auto require_open = [&](const std::string& key) {
    if (!cur) {
      throw ParseError("detections line " + std::to_string(line_no) + ": '" +
                       key + "' outside an instance block");
    }
  };
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key) || key[0] == '#') continue;
    if (key == "instance") {
      if (cur) throw ParseError("detections: unterminated instance block");
      cur = DetectionRecord{};
      if (!(ls >> cur->detection.id)) {
        throw ParseError("detections: instance needs an id");
      }
    } else if (key == "bbox") {
      require_open(key);
      auto& b = cur->detection.bbox;
      if (!(ls >> b.u_min >> b.v_min >> b.u_max >> b.v_max)) {
        throw ParseError("detections: bbox needs 4 integers");
      }
    } else if (key == "pose") {
      require_open(key);
      cur->detection.init_pose = parse_pose16(ls, "detections");
    } else if (key == "mask_left") {
      require_open(key);
      ls >> cur->mask_left_path;
    } else if (key == "mask_right") {
      require_open(key);
      ls >> cur->mask_right_path;
    } else if (key == "gt_cloud") {
      require_open(key);
      ls >> cur->gt_cloud_path;
    } else if (key == "end") {
      require_open(key);
      out.push_back(std::move(*cur));
      cur.reset();
    } else {
      throw ParseError("detections line " + std::to_string(line_no) +
                       ": unknown key '" + key + "'");
    }
  }
  if (cur) throw ParseError("detections: unterminated instance block");
  return out;
}

inline void save_detections(const std::vector<DetectionRecord>& records,
                            std::ostream& os) {
  for (const auto& rec : records) {
    os << "instance " << rec.detection.id << '\n';
    const auto& b = rec.detection.bbox;
    os << "bbox " << b.u_min << ' ' << b.v_min << ' ' << b.u_max << ' ' << b.v_max
       << '\n';
    os << "pose";
    const Mat4 m = rec.detection.init_pose.matrix();
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) os << ' ' << detail::fmt(m(r, c));
    }
    os << '\n';
    if (!rec.mask_left_path.empty()) os << "mask_left " << rec.mask_left_path << '\n';
    if (!rec.mask_right_path.empty()) {
      os << "mask_right " << rec.mask_right_path << '\n';
    }
    if (!rec.gt_cloud_path.empty()) os << "gt_cloud " << rec.gt_cloud_path << '\n';
    os << "end\n";
  }
}

// ---------------------------------------------------------------------------
// Refinement results: same block structure, written with enough digits to
// round-trip doubles exactly.
// ---------------------------------------------------------------------------

struct ResultRecord {
  int instance_id = 0;
  Pose pose;  // object-to-camera
  VecX code;
  EnergyBreakdown energies;
  FitStatus status = FitStatus::max_iterations;
  int iterations = 0;
  std::optional<ShapeMetrics> metrics;
};

inline void save_results(const std::vector<ResultRecord>& records,
                         std::ostream& os) {
  for (const auto& rec : records) {
    os << "instance " << rec.instance_id << '\n';
    os << "status " << to_string(rec.status) << '\n';
    os << "iterations " << rec.iterations << '\n';
    os << "pose";
    const Mat4 m = rec.pose.matrix();
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) os << ' ' << detail::fmt(m(r, c));
    }
    os << '\n';
    os << "code";
    for (Eigen::Index k = 0; k < rec.code.size(); ++k) {
      os << ' ' << detail::fmt(rec.code[k]);
    }
    os << '\n';
    const auto& e = rec.energies;
    os << "energy " << detail::fmt(e.silhouette_left) << ' '
       << detail::fmt(e.silhouette_right) << ' ' << detail::fmt(e.photometric)
       << ' ' << detail::fmt(e.shape) << ' ' << detail::fmt(e.translation) << ' '
       << detail::fmt(e.rotation) << '\n';
    if (rec.metrics) {
      os << "metrics " << detail::fmt(rec.metrics->completeness) << ' '
         << detail::fmt(rec.metrics->accuracy) << ' ' << detail::fmt(rec.metrics->f1)
         << ' ' << detail::fmt(rec.metrics->rmse) << ' '
         << detail::fmt(rec.metrics->tau) << '\n';
    }
    os << "end\n";
  }
}

inline std::vector<ResultRecord> parse_results(std::istream& is) {
  std::vector<ResultRecord> out;
  std::optional<ResultRecord> cur;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key) || key[0] == '#') continue;
    if (key == "instance") {
      if (cur) throw ParseError("results: unterminated block");
      cur = ResultRecord{};
      if (!(ls >> cur->instance_id)) throw ParseError("results: bad instance id");
    } else if (!cur) {
      throw ParseError("results: '" + key + "' outside a block");
    } else if (key == "status") {
      std::string s;
      ls >> s;
      cur->status = fit_status_from_string(s);
    } else if (key == "iterations") {
      ls >> cur->iterations;
    } else if (key == "pose") {
      cur->pose = parse_pose16(ls, "results");
    } else if (key == "code") {
      std::vector<double> vals;
      double v;
      while (ls >> v) vals.push_back(v);
      cur->code = Eigen::Map<VecX>(vals.data(), vals.size());
    } else if (key == "energy") {
      auto& e = cur->energies;
      if (!(ls >> e.silhouette_left >> e.silhouette_right >> e.photometric >>
            e.shape >> e.translation >> e.rotation)) {
        throw ParseError("results: energy needs 6 numbers");
      }
    } else if (key == "metrics") {
      ShapeMetrics m;
      if (!(ls >> m.completeness >> m.accuracy >> m.f1 >> m.rmse >> m.tau)) {
        throw ParseError("results: metrics needs 5 numbers");
      }
      cur->metrics = m;
    } else if (key == "end") {
      out.push_back(std::move(*cur));
      cur.reset();
    } else {
      throw ParseError("results: unknown key '" + key + "'");
    }
  }
  if (cur) throw ParseError("results: unterminated block");
  return out;
}

// ---------------------------------------------------------------------------
// Point clouds: one "x y z" line per point.
// ---------------------------------------------------------------------------

inline void save_xyz(const std::vector<Vec3>& cloud, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open for writing: " + path);
  for (const Vec3& p : cloud) {
    os << detail::fmt(p.x()) << ' ' << detail::fmt(p.y()) << ' '
       << detail::fmt(p.z()) << '\n';
  }
}

inline std::vector<Vec3> load_xyz(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open point cloud: " + path);
  std::vector<Vec3> out;
  double x, y, z;
  while (is >> x >> y >> z) out.emplace_back(x, y, z);
  return out;
}

// ---------------------------------------------------------------------------
// Depth maps: magic "DMAP", u32 version, u32 width, u32 height, then
// row-major little-endian f32 values; misses are stored as +inf.
// ---------------------------------------------------------------------------

inline void save_depth_map(const DepthMap& depth, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open for writing: " + path);
  os.write("DMAP", 4);
  detail::write_raw<std::uint32_t>(os, 1u);
  detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(depth.width));
  detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(depth.height));
  for (double v : depth.data) detail::write_raw<float>(os, static_cast<float>(v));
}

inline DepthMap load_depth_map(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open depth map: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DMAP", 4) != 0) {
    throw ParseError("unrecognized depth map format: " + path);
  }
  if (detail::read_raw<std::uint32_t>(is) != 1u) {
    throw ParseError("unsupported depth map version");
  }
  DepthMap d;
  d.width = static_cast<int>(detail::read_raw<std::uint32_t>(is));
  d.height = static_cast<int>(detail::read_raw<std::uint32_t>(is));
  d.data.resize(static_cast<std::size_t>(d.width) * d.height);
  for (auto& v : d.data) v = static_cast<double>(detail::read_raw<float>(is));
  return d;
}

// ---------------------------------------------------------------------------
// Solver configuration: "key = value" lines with # comments.
// ---------------------------------------------------------------------------

inline void apply_config_entry(SolverConfig& cfg, const std::string& key,
                               const std::string& value) {
  const double v = std::stod(value);
  if (key == "lambda_silhouette") cfg.lambda_silhouette = v;
  else if (key == "lambda_shape") cfg.lambda_shape = v;
  else if (key == "lambda_translation") cfg.lambda_translation = v;
  else if (key == "lambda_rotation") cfg.lambda_rotation = v;
  else if (key == "zeta") cfg.silhouette.zeta = v;
  else if (key == "ray_samples") cfg.silhouette.ray_samples = int(v);
  else if (key == "prob_floor") cfg.silhouette.prob_floor = v;
  else if (key == "huber_gamma") cfg.photometric.huber_gamma = v;
  else if (key == "grad_weight_c") cfg.photometric.grad_weight_c = v;
  else if (key == "pattern_size") cfg.photometric.pattern_size = int(v);
  else if (key == "max_iterations") cfg.max_iterations = int(v);
  else if (key == "step_tol") cfg.step_tol = v;
  else if (key == "mu_init") cfg.mu_init = v;
  else if (key == "mu_max") cfg.mu_max = v;
  else if (key == "max_rejects") cfg.max_rejects = int(v);
  else if (key == "eps_irls") cfg.eps_irls = v;
  else if (key == "pose_only_iterations") cfg.pose_only_iterations = int(v);
  else if (key == "window_margin") cfg.window_margin = v;
  else throw ParseError("config: unknown key '" + key + "'");
}

inline void parse_config(std::istream& is, SolverConfig& cfg) {
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      std::istringstream probe(line);
      std::string tok;
      if (probe >> tok) {
        throw ParseError("config line " + std::to_string(line_no) +
                         ": expected key = value");
      }
      continue;
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ParseError("config line " + std::to_string(line_no) +
                       ": expected key = value");
    }
    apply_config_entry(cfg, key, value);
  }
}

inline void load_config(const std::string& path, SolverConfig& cfg) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open config file: " + path);
  parse_config(is, cfg);
}

// ---------------------------------------------------------------------------
// Overlay: the base image dimmed where a fitted instance projects with at
// least half occupancy, brightened along the occupancy boundary.
// ---------------------------------------------------------------------------

inline GrayImage render_overlay(const GrayImage& base, const CameraIntrinsics& cam,
                                const Pose& obj_to_cam, const SdfGrid& shape,
                                const BBox& bbox, const SilhouetteParams& params) {
  GrayImage out = base;
  const BBox roi = bbox.clipped(base.width, base.height);
  if (roi.empty()) return out;

  const Pose cam_to_obj = obj_to_cam.inverse();
  std::vector<double> occupancy(
      static_cast<std::size_t>(roi.width()) * roi.height(), 0.0);
  for (int v = roi.v_min; v <= roi.v_max; ++v) {
    for (int u = roi.u_min; u <= roi.u_max; ++u) {
      const RaySampleSet set =
          pi_project(shape, cam_to_obj, cam, Vec2(u, v), params);
      occupancy[(v - roi.v_min) * std::size_t(roi.width()) + (u - roi.u_min)] =
          set.pi;
    }
  }
  auto occ = [&](int u, int v) {
    if (!roi.contains(u, v)) return 0.0;
    return occupancy[(v - roi.v_min) * std::size_t(roi.width()) + (u - roi.u_min)];
  };
  for (int v = roi.v_min; v <= roi.v_max; ++v) {
    for (int u = roi.u_min; u <= roi.u_max; ++u) {
      const bool inside = occ(u, v) >= 0.5;
      if (!inside) continue;
      const bool boundary = occ(u - 1, v) < 0.5 || occ(u + 1, v) < 0.5 ||
                            occ(u, v - 1) < 0.5 || occ(u, v + 1) < 0.5;
      double& pix = out.at(u, v);
      pix = boundary ? 1.0 : 0.35 * pix + 0.45;
    }
  }
  return out;
}

}  // namespace shapefit
