// Command line front end: synthetic data generation, model building,
// refinement, derivative verification and point cloud scoring.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "shapefit/shapefit.hpp"

namespace fs = std::filesystem;
using namespace shapefit;

namespace {

std::string resolve_relative(const std::string& base_file, const std::string& path) {
  if (path.empty()) return path;
  fs::path p(path);
  if (p.is_absolute()) return path;
  return (fs::path(base_file).parent_path() / p).string();
}

Pose yaw_pose(double yaw, const Vec3& t) {
  Pose p;
  const double c = std::cos(yaw), s = std::sin(yaw);
  p.rotation << c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c;
  p.translation = t;
  return p;
}

StereoRig default_synth_rig() {
  StereoRig rig;
  rig.left = rig.right = CameraIntrinsics{350.0, 350.0, 159.5, 119.5};
  rig.left_to_right = Pose::identity();
  rig.left_to_right.translation = Vec3(-0.4706, 0.0, 0.0);
  return rig;
}

int run_synth(const std::string& out_dir, int count, int components,
              unsigned seed, double max_shift, double max_yaw_deg) {
  fs::create_directories(out_dir);
  const ShapeModel model = car_family_model(components);
  save_model(model, (fs::path(out_dir) / "model.sfm").string());

  const StereoRig rig = default_synth_rig();
  const GroundPlane plane;
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  for (int i = 0; i < count; ++i) {
    const fs::path scene_dir = fs::path(out_dir) / ("scene_" + std::to_string(i));
    fs::create_directories(scene_dir);

    const double yaw = (2.0 * u01(rng) - 1.0) * M_PI;
    const Vec3 t((2.0 * u01(rng) - 1.0) * 1.5, plane.offset, 7.0 + 4.0 * u01(rng));
    const Pose gt_pose = yaw_pose(yaw, t);
    VecX gt_code(model.num_components());
    for (Eigen::Index k = 0; k < gt_code.size(); ++k) {
      gt_code[k] = (2.0 * u01(rng) - 1.0) * 1.2 * model.sigmas[k];
    }

    const SyntheticScene scene = render_scene(model, gt_code, gt_pose, rig);
    const BBox box = mask_bbox(scene.mask_left, 0.5, 6);
    if (box.empty()) {
      std::cerr << "scene " << i << ": object projects outside the image\n";
      return 1;
    }

    // Initialization: ground-truth pose with a bounded offset, mean shape.
    Vec3 shift((2.0 * u01(rng) - 1.0), (2.0 * u01(rng) - 1.0),
               (2.0 * u01(rng) - 1.0));
    shift = shift.normalized() * (max_shift * u01(rng));
    const double dyaw = (2.0 * u01(rng) - 1.0) * max_yaw_deg * M_PI / 180.0;
    const Pose init = yaw_pose(yaw + dyaw, t + shift);

    {
      std::ofstream os(scene_dir / "calib.txt");
      save_calibration(rig, os);
    }
    save_pgm(scene.left, (scene_dir / "left.pgm").string());
    save_pgm(scene.right, (scene_dir / "right.pgm").string());
    save_pgm(scene.mask_left, (scene_dir / "mask_left_0.pgm").string());
    save_pgm(scene.mask_right, (scene_dir / "mask_right_0.pgm").string());
    save_xyz(scene.gt_cloud, (scene_dir / "gt_cloud_0.xyz").string());
    save_depth_map(scene.depth_left, (scene_dir / "depth_left.dmap").string());
    {
      std::ofstream os(scene_dir / "plane.txt");
      save_ground_plane(plane, os);
    }
    {
      DetectionRecord rec;
      rec.detection.id = 0;
      rec.detection.bbox = box;
      rec.detection.init_pose = init;
      rec.mask_left_path = "mask_left_0.pgm";
      rec.mask_right_path = "mask_right_0.pgm";
      rec.gt_cloud_path = "gt_cloud_0.xyz";
      std::ofstream os(scene_dir / "detections.txt");
      save_detections({rec}, os);
    }
    {
      ResultRecord gt;
      gt.instance_id = 0;
      gt.pose = gt_pose;
      gt.code = gt_code;
      gt.status = FitStatus::converged;
      std::ofstream os(scene_dir / "gt.txt");
      save_results({gt}, os);
    }
    std::cout << "scene " << i << ": bbox " << box.width() << "x" << box.height()
              << " shift " << shift.norm() << " yaw offset " << dyaw * 180.0 / M_PI
              << " deg\n";
  }
  return 0;
}

int run_refine(const std::string& calib, const std::string& left_path,
               const std::string& right_path, const std::string& detections_path,
               const std::string& plane_path, const std::string& model_path,
               const std::string& config_path, const std::string& out_dir,
               bool overlay, int threads, double tau) {
  SolverConfig cfg;
  if (!config_path.empty()) load_config(config_path, cfg);

  StereoFrame frame;
  frame.rig = load_calibration(calib);
  frame.left = load_pgm(left_path);
  frame.right = load_pgm(right_path);
  const GroundPlane plane = load_ground_plane(plane_path);
  const ShapeModel model = load_model(model_path);

  std::ifstream ds(detections_path);
  if (!ds) throw ParseError("cannot open detections: " + detections_path);
  const std::vector<DetectionRecord> records = parse_detections(ds);

  std::vector<Detection> detections;
  std::vector<std::vector<Vec3>> gt_clouds(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    Detection det = records[i].detection;
    det.mask_left = load_pgm(resolve_relative(detections_path, records[i].mask_left_path));
    det.mask_right = load_pgm(resolve_relative(detections_path, records[i].mask_right_path));
    soften_mask(det.mask_left, cfg.silhouette.prob_floor);
    soften_mask(det.mask_right, cfg.silhouette.prob_floor);
    if (!records[i].gt_cloud_path.empty()) {
      gt_clouds[i] = load_xyz(resolve_relative(detections_path, records[i].gt_cloud_path));
    }
    detections.push_back(std::move(det));
  }

  const std::vector<FitResult> fits =
      fit_frame(frame, detections, model, plane, cfg, threads);

  fs::create_directories(out_dir);
  std::vector<ResultRecord> out_records;
  for (std::size_t i = 0; i < fits.size(); ++i) {
    const FitResult& fit = fits[i];
    ResultRecord rec;
    rec.instance_id = fit.instance_id;
    rec.pose = fit.pose;
    rec.code = fit.code;
    rec.energies = fit.energies;
    rec.status = fit.status;
    rec.iterations = fit.iterations;
    if (!gt_clouds[i].empty() && fit.status != FitStatus::skipped_occluded) {
      const std::vector<Vec3> estimated =
          surface_point_cloud(decode(model, fit.code), fit.pose);
      rec.metrics = shape_metrics(estimated, gt_clouds[i], tau);
    }
    out_records.push_back(std::move(rec));

    std::cout << "instance " << fit.instance_id << ": " << to_string(fit.status)
              << " after " << fit.iterations << " iterations, "
              << fit.pixel_count << " pixels, energy "
              << fit.energies.total(cfg);
    if (out_records.back().metrics) {
      std::cout << ", f1 " << out_records.back().metrics->f1 << ", rmse "
                << out_records.back().metrics->rmse;
    }
    std::cout << "\n";
  }
  {
    std::ofstream os(fs::path(out_dir) / "results.txt");
    save_results(out_records, os);
  }

  if (overlay) {
    GrayImage canvas = frame.left;
    for (std::size_t i = 0; i < fits.size(); ++i) {
      if (fits[i].status == FitStatus::skipped_occluded) continue;
      canvas = render_overlay(canvas, frame.rig.left, fits[i].pose,
                              decode(model, fits[i].code), detections[i].bbox,
                              cfg.silhouette);
    }
    save_pgm(canvas, (fs::path(out_dir) / "overlay.pgm").string());
  }
  return 0;
}

int run_build_model(const std::vector<std::string>& exemplar_paths,
                    bool car_family, int components, const std::string& out) {
  ShapeModel model;
  if (car_family) {
    model = car_family_model(components);
  } else {
    std::vector<SdfGrid> exemplars;
    for (const std::string& p : exemplar_paths) exemplars.push_back(load_grid(p));
    model = build_model(exemplars, components);
  }
  save_model(model, out);
  std::cout << "model with " << model.num_components() << " components, sigmas:";
  for (Eigen::Index k = 0; k < model.sigmas.size(); ++k) {
    std::cout << " " << model.sigmas[k];
  }
  std::cout << "\n";
  return 0;
}

int run_check_jacobians(int configs, unsigned seed) {
  const std::vector<JacobianReport> reports = run_all_jacobian_checks(configs, seed);
  bool all_passed = true;
  std::printf("%-18s %8s %12s %12s %10s %8s %s\n", "family", "configs",
              "comparisons", "max_error", "tolerance", "seconds", "verdict");
  for (const JacobianReport& r : reports) {
    std::printf("%-18s %8d %12d %12.3e %10.0e %8.2f %s\n", r.family.c_str(),
                r.configs, r.comparisons, r.max_error, r.tolerance, r.seconds,
                r.passed ? "pass" : "FAIL");
    all_passed = all_passed && r.passed;
  }
  return all_passed ? 0 : 1;
}

int run_metrics(const std::string& estimated_path, const std::string& truth_path,
                double tau) {
  const ShapeMetrics m =
      shape_metrics(load_xyz(estimated_path), load_xyz(truth_path), tau);
  std::cout << "completeness " << m.completeness << "\naccuracy " << m.accuracy
            << "\nf1 " << m.f1 << "\nrmse " << m.rmse << "\nmatched " << m.matched
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stereo shape and pose refinement"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "render synthetic stereo scenes");
  std::string synth_out = "synth";
  int synth_count = 1, synth_components = 3;
  unsigned synth_seed = 1;
  double synth_shift = 0.3, synth_yaw = 5.0;
  synth->add_option("--out-dir", synth_out, "output directory");
  synth->add_option("--count", synth_count, "number of scenes");
  synth->add_option("--components", synth_components, "shape basis size");
  synth->add_option("--seed", synth_seed, "random seed");
  synth->add_option("--max-shift", synth_shift, "initialization offset bound, meters");
  synth->add_option("--max-yaw", synth_yaw, "initialization yaw bound, degrees");

  // refine
  auto* refine = app.add_subcommand("refine", "refine pose and shape from a stereo pair");
  std::string calib, left, right, detections, plane_path, model_path, config_path;
  std::string refine_out = "out";
  bool overlay = false;
  int threads = 1;
  double tau = 0.2;
  refine->add_option("--calib", calib, "calibration file")->required();
  refine->add_option("--left", left, "left image (pgm)")->required();
  refine->add_option("--right", right, "right image (pgm)")->required();
  refine->add_option("--detections", detections, "detections file")->required();
  refine->add_option("--plane", plane_path, "ground plane file")->required();
  refine->add_option("--model", model_path, "shape model file")->required();
  refine->add_option("--config", config_path, "solver configuration file");
  refine->add_option("--out-dir", refine_out, "output directory");
  refine->add_flag("--overlay", overlay, "write a silhouette overlay image");
  refine->add_option("--threads", threads, "instances fitted in parallel");
  refine->add_option("--tau", tau, "point cloud match radius, meters");

  // build-model
  auto* build = app.add_subcommand("build-model", "build a shape basis from exemplar grids");
  std::vector<std::string> exemplar_paths;
  bool car_family = false;
  int components = 3;
  std::string model_out = "model.sfm";
  build->add_option("--exemplar", exemplar_paths, "exemplar grid file (repeatable)");
  build->add_flag("--car-family", car_family, "use the built-in car exemplars");
  build->add_option("--components", components, "number of basis grids");
  build->add_option("--out", model_out, "output model file");

  // check-jacobians
  auto* check = app.add_subcommand("check-jacobians",
                                   "compare closed-form derivatives against finite differences");
  int check_configs = 500;
  unsigned check_seed = 7;
  check->add_option("--configs", check_configs, "configurations per family");
  check->add_option("--seed", check_seed, "random seed");

  // metrics
  auto* metrics = app.add_subcommand("metrics", "score a point cloud against ground truth");
  std::string est_path, truth_path;
  double metrics_tau = 0.2;
  metrics->add_option("--estimated", est_path, "estimated cloud (xyz)")->required();
  metrics->add_option("--truth", truth_path, "ground truth cloud (xyz)")->required();
  metrics->add_option("--tau", metrics_tau, "match radius, meters");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      return run_synth(synth_out, synth_count, synth_components, synth_seed,
                       synth_shift, synth_yaw);
    }
    if (refine->parsed()) {
      return run_refine(calib, left, right, detections, plane_path, model_path,
                        config_path, refine_out, overlay, threads, tau);
    }
    if (build->parsed()) {
      return run_build_model(exemplar_paths, car_family, components, model_out);
    }
    if (check->parsed()) return run_check_jacobians(check_configs, check_seed);
    if (metrics->parsed()) return run_metrics(est_path, truth_path, metrics_tau);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
