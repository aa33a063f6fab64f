#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "shapefit/io.hpp"
#include "shapefit/synthetic.hpp"

namespace shapefit {
namespace {

std::string temp_path(const std::string& name) {
  return testing::TempDir() + name;
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

TEST(CalibrationIo, ParsesProjectionMatrixPairs) {
  // A realistic rectified calibration block. Rows other than P2:/P3: must be
  // ignored, as must the columns beyond fu/fv/cu/cv and the right x offset.
  std::istringstream is(
      "P0: 7.215377e+02 0 6.095593e+02 0 0 7.215377e+02 1.728540e+02 0 0 0 1 0\n"
      "P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 "
      "7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 "
      "1.000000e+00 2.745884e-03\n"
      "P3: 7.215377e+02 0.000000e+00 6.095593e+02 -3.395242e+02 0.000000e+00 "
      "7.215377e+02 1.728540e+02 2.199936e+00 0.000000e+00 0.000000e+00 "
      "1.000000e+00 2.729905e-03\n"
      "Tr_velo_to_cam: 0 0 1 0 -1 0 0 0 0 -1 0 0\n");
  const StereoRig rig = parse_calibration(is);

  EXPECT_DOUBLE_EQ(rig.left.fu, 721.5377);
  EXPECT_DOUBLE_EQ(rig.left.fv, 721.5377);
  EXPECT_DOUBLE_EQ(rig.left.cu, 609.5593);
  EXPECT_DOUBLE_EQ(rig.left.cv, 172.854);
  EXPECT_DOUBLE_EQ(rig.right.fu, rig.left.fu);
  EXPECT_DOUBLE_EQ(rig.right.cu, rig.left.cu);

  // -P3(0,3) / fu for this matrix pair.
  EXPECT_NEAR(rig.baseline(), 0.4706, 1e-3);
  EXPECT_DOUBLE_EQ(rig.left_to_right.translation.x(), -rig.baseline());
  EXPECT_TRUE(rig.left_to_right.rotation.isIdentity(0.0));
}

TEST(CalibrationIo, SaveParseRoundTrip) {
  StereoRig rig;
  rig.left = CameraIntrinsics{350.25, 351.5, 160.125, 120.0625};
  rig.right = CameraIntrinsics{350.25, 351.5, 161.5, 120.0625};
  rig.left_to_right = Pose::identity();
  rig.left_to_right.translation = Vec3(-0.54, 0.0, 0.0);

  std::ostringstream os;
  save_calibration(rig, os);
  std::istringstream is(os.str());
  const StereoRig back = parse_calibration(is);

  EXPECT_EQ(back.left.fu, rig.left.fu);
  EXPECT_EQ(back.left.fv, rig.left.fv);
  EXPECT_EQ(back.left.cu, rig.left.cu);
  EXPECT_EQ(back.left.cv, rig.left.cv);
  EXPECT_EQ(back.right.cu, rig.right.cu);
  // The x offset passes through one multiply and one divide by fu.
  EXPECT_NEAR(back.baseline(), rig.baseline(), 1e-12);
}

TEST(CalibrationIo, RejectsMalformedInput) {
  {
    std::istringstream is("P2: 700 0 320 0 0 700 240 0 0 0 1 0\n");
    EXPECT_THROW(parse_calibration(is), ParseError);  // no P3
  }
  {
    std::istringstream is("P2: 700 0 320\nP3: 700 0 320 -70 0 700 240 0 0 0 1 0\n");
    EXPECT_THROW(parse_calibration(is), ParseError);  // short row
  }
  {
    std::istringstream is(
        "P2: 700 0 320 0 0 700 240 0 0 0 1 0\n"
        "P3: 700 0 320 70 0 700 240 0 0 0 1 0\n");
    EXPECT_THROW(parse_calibration(is), ParseError);  // baseline <= 0
  }
  {
    std::istringstream is(
        "P2: -700 0 320 0 0 700 240 0 0 0 1 0\n"
        "P3: -700 0 320 -70 0 700 240 0 0 0 1 0\n");
    EXPECT_THROW(parse_calibration(is), ParseError);  // focal <= 0
  }
  EXPECT_THROW(load_calibration(temp_path("no_such_calib.txt")), ParseError);
}

// ---------------------------------------------------------------------------
// PGM images
// ---------------------------------------------------------------------------

TEST(PgmIo, BinaryRoundTripIsExact) {
  GrayImage img(7, 5);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    img.data[i] = double((i * 37) % 256) / 255.0;  // exact 8-bit levels
  }
  const std::string path = temp_path("roundtrip.pgm");
  save_pgm(img, path);
  const GrayImage back = load_pgm(path);

  ASSERT_EQ(back.width, img.width);
  ASSERT_EQ(back.height, img.height);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    EXPECT_EQ(back.data[i], img.data[i]) << "pixel " << i;
  }
  std::remove(path.c_str());
}

TEST(PgmIo, SaveClampsOutOfRangeValues) {
  GrayImage img(2, 1);
  img.at(0, 0) = -0.25;
  img.at(1, 0) = 1.75;
  const std::string path = temp_path("clamp.pgm");
  save_pgm(img, path);
  const GrayImage back = load_pgm(path);
  EXPECT_EQ(back.at(0, 0), 0.0);
  EXPECT_EQ(back.at(1, 0), 1.0);
  std::remove(path.c_str());
}

TEST(PgmIo, ReadsAsciiVariantWithComments) {
  const std::string path = temp_path("ascii.pgm");
  {
    std::ofstream os(path);
    os << "P2\n"
       << "# a header comment\n"
       << "4 2\n"
       << "# maxval follows\n"
       << "100\n"
       << "0 25 50 75\n"
       << "100 100 0 13\n";
  }
  const GrayImage img = load_pgm(path);
  ASSERT_EQ(img.width, 4);
  ASSERT_EQ(img.height, 2);
  EXPECT_DOUBLE_EQ(img.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(img.at(1, 0), 0.25);
  EXPECT_DOUBLE_EQ(img.at(3, 0), 0.75);
  EXPECT_DOUBLE_EQ(img.at(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(img.at(3, 1), 0.13);
  std::remove(path.c_str());
}

TEST(PgmIo, RejectsBadHeadersAndTruncation) {
  auto write_file = [](const std::string& path, const std::string& body) {
    std::ofstream os(path, std::ios::binary);
    os << body;
  };
  const std::string path = temp_path("bad.pgm");

  write_file(path, "P6\n2 2\n255\nxxxx");
  EXPECT_THROW(load_pgm(path), ParseError);  // unsupported magic

  write_file(path, "P5\n2 2\n300\nxxxx");
  EXPECT_THROW(load_pgm(path), ParseError);  // 16-bit maxval unsupported

  write_file(path, "P5\n4 4\n255\nxx");
  EXPECT_THROW(load_pgm(path), ParseError);  // truncated raster

  write_file(path, "P2\n2 2\n255\n1 2 3\n");
  EXPECT_THROW(load_pgm(path), ParseError);  // missing ascii sample

  EXPECT_THROW(load_pgm(temp_path("no_such.pgm")), ParseError);
  std::remove(path.c_str());
}

TEST(PgmIo, SoftenMaskClampsIntoOpenInterval) {
  GrayImage mask(4, 1);
  mask.at(0, 0) = 0.0;
  mask.at(1, 0) = 1.0;
  mask.at(2, 0) = 0.5;
  mask.at(3, 0) = 0.002;
  soften_mask(mask, 1e-3);
  EXPECT_EQ(mask.at(0, 0), 1e-3);
  EXPECT_EQ(mask.at(1, 0), 1.0 - 1e-3);
  EXPECT_EQ(mask.at(2, 0), 0.5);
  EXPECT_EQ(mask.at(3, 0), 0.002);
}

// ---------------------------------------------------------------------------
// Ground plane
// ---------------------------------------------------------------------------

TEST(GroundPlaneIo, NormalizesTheStoredRow) {
  std::istringstream is("0 -2 0 3.3\n");
  const GroundPlane plane = parse_ground_plane(is);
  EXPECT_DOUBLE_EQ(plane.normal.x(), 0.0);
  EXPECT_DOUBLE_EQ(plane.normal.y(), -1.0);
  EXPECT_DOUBLE_EQ(plane.normal.z(), 0.0);
  EXPECT_DOUBLE_EQ(plane.offset, 1.65);
  EXPECT_DOUBLE_EQ(plane.height_at(0.0, 10.0), 1.65);
}

TEST(GroundPlaneIo, RoundTripsExactly) {
  GroundPlane plane;
  plane.normal = Vec3(0.06, -0.9955, 0.02).normalized();
  plane.offset = 1.62;
  std::ostringstream os;
  save_ground_plane(plane, os);
  std::istringstream is(os.str());
  const GroundPlane back = parse_ground_plane(is);
  // Already unit length, so the parser's normalization is a divide by a value
  // within one ulp of 1.
  EXPECT_NEAR((back.normal - plane.normal).norm(), 0.0, 1e-15);
  EXPECT_NEAR(back.offset, plane.offset, 1e-15);
}

TEST(GroundPlaneIo, RejectsDegenerateRows) {
  {
    std::istringstream is("0 0 0 1\n");
    EXPECT_THROW(parse_ground_plane(is), ParseError);  // zero normal
  }
  {
    std::istringstream is("1 0 0 1\n");
    EXPECT_THROW(parse_ground_plane(is), ParseError);  // horizontal normal
  }
  {
    std::istringstream is("0 -1 0\n");
    EXPECT_THROW(parse_ground_plane(is), ParseError);  // short row
  }
}

// ---------------------------------------------------------------------------
// Detection and result blocks
// ---------------------------------------------------------------------------

Pose generic_pose(double seed) {
  Twist xi;
  xi << 0.1 * seed, -0.2, 0.3 + 0.05 * seed, 0.02 * seed, -0.03, 0.01;
  Pose p = se3_exp(xi);
  p.translation += Vec3(0.0, 1.65, 9.0);
  return p;
}

TEST(DetectionIo, RoundTripsEveryField) {
  std::vector<DetectionRecord> recs(2);
  recs[0].detection.id = 3;
  recs[0].detection.bbox = BBox{10, 20, 200, 180};
  recs[0].detection.init_pose = generic_pose(1.0);
  recs[0].mask_left_path = "masks/inst3_left.pgm";
  recs[0].mask_right_path = "masks/inst3_right.pgm";
  recs[0].gt_cloud_path = "gt/cloud3.xyz";
  recs[1].detection.id = 7;
  recs[1].detection.bbox = BBox{-5, 0, 40, 33};
  recs[1].detection.init_pose = generic_pose(-2.0);
  recs[1].mask_left_path = "a.pgm";
  recs[1].mask_right_path = "b.pgm";

  std::ostringstream os;
  save_detections(recs, os);
  std::istringstream is(os.str());
  const auto back = parse_detections(is);

  ASSERT_EQ(back.size(), 2u);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].detection.id, recs[i].detection.id);
    EXPECT_EQ(back[i].detection.bbox.u_min, recs[i].detection.bbox.u_min);
    EXPECT_EQ(back[i].detection.bbox.v_min, recs[i].detection.bbox.v_min);
    EXPECT_EQ(back[i].detection.bbox.u_max, recs[i].detection.bbox.u_max);
    EXPECT_EQ(back[i].detection.bbox.v_max, recs[i].detection.bbox.v_max);
    // 17 significant digits round-trip doubles bit for bit.
    EXPECT_EQ(back[i].detection.init_pose.matrix(),
              recs[i].detection.init_pose.matrix());
    EXPECT_EQ(back[i].mask_left_path, recs[i].mask_left_path);
    EXPECT_EQ(back[i].mask_right_path, recs[i].mask_right_path);
    EXPECT_EQ(back[i].gt_cloud_path, recs[i].gt_cloud_path);
  }
}

TEST(DetectionIo, RejectsStructuralErrors) {
  {
    std::istringstream is("bbox 0 0 1 1\n");
    EXPECT_THROW(parse_detections(is), ParseError);  // key outside a block
  }
  {
    std::istringstream is("instance 0\nbbox 0 0 1 1\n");
    EXPECT_THROW(parse_detections(is), ParseError);  // missing end
  }
  {
    std::istringstream is("instance 0\ninstance 1\n");
    EXPECT_THROW(parse_detections(is), ParseError);  // nested block
  }
  {
    std::istringstream is("instance 0\nwheelbase 2.7\nend\n");
    EXPECT_THROW(parse_detections(is), ParseError);  // unknown key
  }
  {
    std::istringstream is("instance 0\npose 1 0 0\nend\n");
    EXPECT_THROW(parse_detections(is), ParseError);  // short pose row
  }
}

TEST(DetectionIo, SkipsCommentsAndBlankLines) {
  std::istringstream is(
      "# produced by hand\n"
      "\n"
      "instance 4\n"
      "bbox 1 2 3 4\n"
      "end\n");
  const auto recs = parse_detections(is);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].detection.id, 4);
  EXPECT_TRUE(recs[0].mask_left_path.empty());
}

TEST(ResultIo, RoundTripsExactly) {
  std::vector<ResultRecord> recs(2);
  recs[0].instance_id = 0;
  recs[0].pose = generic_pose(0.5);
  recs[0].code = VecX(3);
  recs[0].code << 0.1, -2.0 / 3.0, 1e-7;
  recs[0].energies = EnergyBreakdown{0.125, 0.25, 1.0 / 3.0, 0.49, 1e-6, 2e-9};
  recs[0].status = FitStatus::converged;
  recs[0].iterations = 17;
  recs[0].metrics = ShapeMetrics{0.9, 0.8, 2.0 * 0.9 * 0.8 / 1.7, 0.015, 0.2};

  recs[1].instance_id = 9;
  recs[1].pose = generic_pose(-1.0);
  recs[1].code = VecX(1);
  recs[1].code << -0.75;
  recs[1].status = FitStatus::skipped_occluded;
  recs[1].iterations = 0;

  std::ostringstream os;
  save_results(recs, os);
  std::istringstream is(os.str());
  const auto back = parse_results(is);

  ASSERT_EQ(back.size(), 2u);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].instance_id, recs[i].instance_id);
    EXPECT_EQ(back[i].status, recs[i].status);
    EXPECT_EQ(back[i].iterations, recs[i].iterations);
    EXPECT_EQ(back[i].pose.matrix(), recs[i].pose.matrix());
    ASSERT_EQ(back[i].code.size(), recs[i].code.size());
    EXPECT_EQ(back[i].code, recs[i].code);
    EXPECT_EQ(back[i].energies.silhouette_left, recs[i].energies.silhouette_left);
    EXPECT_EQ(back[i].energies.silhouette_right,
              recs[i].energies.silhouette_right);
    EXPECT_EQ(back[i].energies.photometric, recs[i].energies.photometric);
    EXPECT_EQ(back[i].energies.shape, recs[i].energies.shape);
    EXPECT_EQ(back[i].energies.translation, recs[i].energies.translation);
    EXPECT_EQ(back[i].energies.rotation, recs[i].energies.rotation);
  }
  ASSERT_TRUE(back[0].metrics.has_value());
  EXPECT_EQ(back[0].metrics->completeness, recs[0].metrics->completeness);
  EXPECT_EQ(back[0].metrics->accuracy, recs[0].metrics->accuracy);
  EXPECT_EQ(back[0].metrics->f1, recs[0].metrics->f1);
  EXPECT_EQ(back[0].metrics->rmse, recs[0].metrics->rmse);
  EXPECT_EQ(back[0].metrics->tau, recs[0].metrics->tau);
  EXPECT_FALSE(back[1].metrics.has_value());
}

TEST(ResultIo, StatusStringsRoundTrip) {
  for (FitStatus s : {FitStatus::converged, FitStatus::max_iterations,
                      FitStatus::diverged, FitStatus::skipped_occluded}) {
    EXPECT_EQ(fit_status_from_string(to_string(s)), s);
  }
  EXPECT_THROW(fit_status_from_string("excellent"), std::invalid_argument);
}

TEST(ResultIo, RejectsMalformedBlocks) {
  {
    std::istringstream is("status converged\n");
    EXPECT_THROW(parse_results(is), ParseError);
  }
  {
    std::istringstream is("instance 0\nenergy 1 2 3\nend\n");
    EXPECT_THROW(parse_results(is), ParseError);  // energy needs 6 numbers
  }
  {
    std::istringstream is("instance 0\nconfidence 0.9\nend\n");
    EXPECT_THROW(parse_results(is), ParseError);  // unknown key
  }
  {
    std::istringstream is("instance 0\nstatus converged\n");
    EXPECT_THROW(parse_results(is), ParseError);  // unterminated
  }
}

// ---------------------------------------------------------------------------
// Point clouds and depth maps
// ---------------------------------------------------------------------------

TEST(CloudIo, XyzRoundTripIsExact) {
  const std::vector<Vec3> cloud = {
      Vec3(0.1, -2.0 / 3.0, 9.25),
      Vec3(-1e-12, 3.14159265358979, -7.0),
      Vec3(0.0, 0.0, 0.0),
  };
  const std::string path = temp_path("cloud.xyz");
  save_xyz(cloud, path);
  const auto back = load_xyz(path);
  ASSERT_EQ(back.size(), cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    EXPECT_EQ(back[i], cloud[i]);
  }
  std::remove(path.c_str());
  EXPECT_THROW(load_xyz(temp_path("no_such.xyz")), ParseError);
}

TEST(DepthIo, RoundTripPreservesValuesAndMisses) {
  DepthMap d;
  d.width = 3;
  d.height = 2;
  d.data = {7.25, std::numeric_limits<double>::infinity(), 0.5,
            1024.0, 3.0, 0.125};  // float-representable plus one miss
  const std::string path = temp_path("depth.dmap");
  save_depth_map(d, path);
  const DepthMap back = load_depth_map(path);

  ASSERT_EQ(back.width, 3);
  ASSERT_EQ(back.height, 2);
  EXPECT_EQ(back.at(0, 0), 7.25);
  EXPECT_FALSE(back.finite_at(1, 0));
  EXPECT_TRUE(std::isinf(back.at(1, 0)));
  EXPECT_EQ(back.at(2, 0), 0.5);
  EXPECT_EQ(back.at(0, 1), 1024.0);
  EXPECT_EQ(back.at(2, 1), 0.125);
  std::remove(path.c_str());
}

TEST(DepthIo, RejectsForeignFiles) {
  const std::string path = temp_path("not_depth.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "XMAPgarbage";
  }
  EXPECT_THROW(load_depth_map(path), ParseError);
  std::remove(path.c_str());
  EXPECT_THROW(load_depth_map(temp_path("no_such.dmap")), ParseError);
}

// ---------------------------------------------------------------------------
// Solver configuration
// ---------------------------------------------------------------------------

TEST(ConfigIo, AppliesEveryKey) {
  std::istringstream is(
      "# refinement settings\n"
      "lambda_silhouette = 11\n"
      "lambda_shape = 9.5\n"
      "lambda_translation = 8\n"
      "lambda_rotation = 1e6\n"
      "zeta = 60   # steepness\n"
      "ray_samples = 24\n"
      "prob_floor = 0.002\n"
      "huber_gamma = 0.04\n"
      "grad_weight_c = 0.25\n"
      "pattern_size = 5\n"
      "\n"
      "max_iterations = 30\n"
      "step_tol = 1e-7\n"
      "mu_init = 0.001\n"
      "mu_max = 1e9\n"
      "max_rejects = 4\n"
      "eps_irls = 1e-5\n"
      "pose_only_iterations = 2\n"
      "window_margin = 0.8\n");
  SolverConfig cfg;
  parse_config(is, cfg);

  EXPECT_EQ(cfg.lambda_silhouette, 11.0);
  EXPECT_EQ(cfg.lambda_shape, 9.5);
  EXPECT_EQ(cfg.lambda_translation, 8.0);
  EXPECT_EQ(cfg.lambda_rotation, 1e6);
  EXPECT_EQ(cfg.silhouette.zeta, 60.0);
  EXPECT_EQ(cfg.silhouette.ray_samples, 24);
  EXPECT_EQ(cfg.silhouette.prob_floor, 0.002);
  EXPECT_EQ(cfg.photometric.huber_gamma, 0.04);
  EXPECT_EQ(cfg.photometric.grad_weight_c, 0.25);
  EXPECT_EQ(cfg.photometric.pattern_size, 5);
  EXPECT_EQ(cfg.max_iterations, 30);
  EXPECT_EQ(cfg.step_tol, 1e-7);
  EXPECT_EQ(cfg.mu_init, 0.001);
  EXPECT_EQ(cfg.mu_max, 1e9);
  EXPECT_EQ(cfg.max_rejects, 4);
  EXPECT_EQ(cfg.eps_irls, 1e-5);
  EXPECT_EQ(cfg.pose_only_iterations, 2);
  EXPECT_EQ(cfg.window_margin, 0.8);
}

TEST(ConfigIo, LeavesUnmentionedKeysAtDefaults) {
  std::istringstream is("max_iterations = 3\n");
  SolverConfig cfg;
  const SolverConfig defaults;
  parse_config(is, cfg);
  EXPECT_EQ(cfg.max_iterations, 3);
  EXPECT_EQ(cfg.lambda_silhouette, defaults.lambda_silhouette);
  EXPECT_EQ(cfg.mu_init, defaults.mu_init);
  EXPECT_EQ(cfg.silhouette.zeta, defaults.silhouette.zeta);
}

TEST(ConfigIo, ReportsUnknownKeysAndBadLines) {
  {
    std::istringstream is("warp_speed = 9\n");
    SolverConfig cfg;
    try {
      parse_config(is, cfg);
      FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
      EXPECT_NE(std::string(e.what()).find("warp_speed"), std::string::npos);
    }
  }
  {
    std::istringstream is("# fine\nmax_iterations 30\n");
    SolverConfig cfg;
    try {
      parse_config(is, cfg);
      FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
      EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
  }
  EXPECT_THROW(
      {
        SolverConfig cfg;
        load_config(temp_path("no_such.cfg"), cfg);
      },
      ParseError);
}

// ---------------------------------------------------------------------------
// Overlay rendering
// ---------------------------------------------------------------------------

TEST(OverlayIo, MarksInteriorAndBoundary) {
  SdfGrid shape = make_grid(Eigen::Vector3i(21, 21, 21), Vec3(-2.0, -2.0, -2.0), 0.2);
  for (int k = 0; k < 21; ++k)
    for (int j = 0; j < 21; ++j)
      for (int i = 0; i < 21; ++i)
        shape.at(i, j, k) = 1.0 - shape.voxel_center(i, j, k).norm();

  GrayImage base(40, 30);
  for (double& v : base.data) v = 0.5;

  Pose obj_to_cam = Pose::identity();
  obj_to_cam.translation = Vec3(0.0, 0.0, 5.0);
  const CameraIntrinsics cam{30.0, 30.0, 19.5, 14.5};
  const BBox bbox{5, 2, 34, 27};

  const GrayImage out =
      render_overlay(base, cam, obj_to_cam, shape, bbox, SilhouetteParams{});

  ASSERT_EQ(out.width, base.width);
  ASSERT_EQ(out.height, base.height);
  int boundary = 0, interior = 0;
  for (double v : out.data) {
    if (v == 1.0) ++boundary;
    if (std::abs(v - (0.35 * 0.5 + 0.45)) < 1e-12) ++interior;
  }
  EXPECT_GT(boundary, 4);
  EXPECT_GT(interior, 10);
  // Pixels outside the box are untouched.
  EXPECT_EQ(out.at(0, 0), 0.5);
  EXPECT_EQ(out.at(39, 29), 0.5);
}

}  // namespace
}  // namespace shapefit
