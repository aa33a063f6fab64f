#pragma once

#include <cmath>
#include <future>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "shapefit/energy_photometric.hpp"
#include "shapefit/energy_priors.hpp"
#include "shapefit/energy_silhouette.hpp"
#include "shapefit/geometry.hpp"
#include "shapefit/image.hpp"
#include "shapefit/sampling.hpp"
#include "shapefit/sdf_grid.hpp"
#include "shapefit/shape_model.hpp"
#include "shapefit/types.hpp"

namespace shapefit {

struct SolverConfig {
  double lambda_silhouette = 12.0;
  double lambda_shape = 10.0;
  double lambda_translation = 10.0;
  double lambda_rotation = 1e7;

  SilhouetteParams silhouette;
  PhotometricParams photometric;

  int max_iterations = 50;
  double step_tol = 1e-6;
  double mu_init = 1e-4;
  double mu_max = 1e10;
  int max_rejects = 5;       // consecutive damping escalations before giving up
  double eps_irls = 1e-6;    // floor for the reweighting 1 / max(r, eps)
  int pose_only_iterations = 0;
  double window_margin = 0.6;  // ray-window reach beyond the grid box, meters
};

enum class FitStatus { converged, max_iterations, diverged, skipped_occluded };

inline const char* to_string(FitStatus s) {
  switch (s) {
    case FitStatus::converged: return "converged";
    case FitStatus::max_iterations: return "max-iterations";
    case FitStatus::diverged: return "diverged";
    case FitStatus::skipped_occluded: return "skipped-occluded";
  }
  return "unknown";
}

inline FitStatus fit_status_from_string(const std::string& s) {
  if (s == "converged") return FitStatus::converged;
  if (s == "max-iterations") return FitStatus::max_iterations;
  if (s == "diverged") return FitStatus::diverged;
  if (s == "skipped-occluded") return FitStatus::skipped_occluded;
  throw std::invalid_argument("unknown fit status: " + s);
}

/// Reweighting that turns the squared silhouette residual back into its
/// value at the linearization point: w * r^2 = r when r exceeds the floor.
inline double irls_weight(double r, double eps) { return 1.0 / std::max(r, eps); }

/// Raw per-term energies; total() applies the configured weights.
struct EnergyBreakdown {
  double silhouette_left = 0.0;   // mean residual over the pixel set
  double silhouette_right = 0.0;
  double photometric = 0.0;       // normalized robust cost
  double shape = 0.0;             // sum of squared shape-prior residuals
  double translation = 0.0;
  double rotation = 0.0;

  double total(const SolverConfig& cfg) const {
    return cfg.lambda_silhouette * (silhouette_left + silhouette_right) +
           photometric + cfg.lambda_shape * shape +
           cfg.lambda_translation * translation + cfg.lambda_rotation * rotation;
  }
};

struct IterationRecord {
  int iteration = 0;
  double energy = 0.0;
  double sum_r_silhouette = 0.0;   // over both views
  double sum_weighted_r2 = 0.0;    // sum of w' * r^2 with the IRLS weights
  double mu = 0.0;
  double step_norm = 0.0;
};

struct FitResult {
  int instance_id = 0;
  Pose pose;  // object-to-camera
  ShapeCode code;
  EnergyBreakdown energies;
  FitStatus status = FitStatus::max_iterations;
  int iterations = 0;
  std::vector<IterationRecord> trace;
  std::size_t pixel_count = 0;
};

struct InstanceProblem {
  const StereoFrame* frame = nullptr;
  const ShapeModel* model = nullptr;
  Detection detection;
  PixelSet pixels;
  GroundPlane plane;
};

struct NormalEquations {
  MatX H;
  VecX b;
  EnergyBreakdown energy;
  double sum_r_silhouette = 0.0;
  double sum_weighted_r2 = 0.0;
  int photometric_pixels = 0;  // |Omega'| at this state
};

/// Per-pixel ray windows for both views, fixed once per fit. Holding the
/// sample positions constant makes the silhouette energy one well-defined
/// function of pose and code: its closed-form Jacobian is exact for the
/// discretization, and candidate steps are scored on the same function they
/// were derived from. Recomputing the windows at every trial pose instead
/// injects large artifact gradients wherever a ray grazes the grid box,
/// because the fixed sample count redistributes over a pose-dependent span.
struct RayWindowSet {
  std::vector<RayWindow> left;
  std::vector<RayWindow> right;
};

/// Builds the frozen windows at the fit's starting pose. The clip box is
/// grown by cfg.window_margin so the windows keep covering the object while
/// the pose is corrected; rays that miss even the grown box stay invalid and
/// score as empty background for the whole fit.
inline RayWindowSet freeze_ray_windows(const InstanceProblem& problem,
                                       const Pose& cam_to_obj,
                                       const SdfGrid& decoded,
                                       const SolverConfig& cfg) {
  const StereoFrame& frame = *problem.frame;
  const Pose right_cam_to_obj =
      compose(cam_to_obj, frame.rig.left_to_right.inverse());
  RayWindowSet ws;
  ws.left.reserve(problem.pixels.size());
  ws.right.reserve(problem.pixels.size());
  for (const SampledPixel& px : problem.pixels.pixels) {
    const Vec2 pixel(px.u, px.v);
    ws.left.push_back(clip_ray_to_inflated_grid(
        decoded, cfg.window_margin, cam_to_obj.translation,
        cam_to_obj.rotation * pixel_ray(frame.rig.left, pixel)));
    ws.right.push_back(clip_ray_to_inflated_grid(
        decoded, cfg.window_margin, right_cam_to_obj.translation,
        right_cam_to_obj.rotation * pixel_ray(frame.rig.right, pixel)));
  }
  return ws;
}

/// Accumulates the Gauss-Newton system at (cam_to_obj, z). decoded must be
/// decode(*problem.model, z). When with_jacobians is false only the energies
/// are produced, which is how candidate steps are scored. windows, when
/// given, pins each silhouette ray's sample positions; the solver passes the
/// set frozen at the starting pose so all its evaluations agree.
inline NormalEquations build_normal_equations(const InstanceProblem& problem,
                                              const Pose& cam_to_obj,
                                              const ShapeCode& z,
                                              const SdfGrid& decoded,
                                              const SolverConfig& cfg,
                                              bool with_jacobians = true,
                                              const RayWindowSet* windows = nullptr) {
  const ShapeModel& model = *problem.model;
  const StereoFrame& frame = *problem.frame;
  const int K = model.num_components();
  const int dim = 6 + K;

  NormalEquations ne;
  ne.H = MatX::Zero(dim, dim);
  ne.b = VecX::Zero(dim);

  const std::size_t n_pixels = problem.pixels.size();
  if (n_pixels > 0) {
    const double inv_omega = 1.0 / double(n_pixels);

    struct View {
      const GrayImage* mask;
      Pose cam_to_obj;
      const CameraIntrinsics* cam;
      const std::vector<RayWindow>* windows;
      double* energy;
    };
    const Pose right_cam_to_obj =
        compose(cam_to_obj, frame.rig.left_to_right.inverse());
    View views[2] = {
        {&problem.detection.mask_left, cam_to_obj, &frame.rig.left,
         windows ? &windows->left : nullptr, &ne.energy.silhouette_left},
        {&problem.detection.mask_right, right_cam_to_obj, &frame.rig.right,
         windows ? &windows->right : nullptr, &ne.energy.silhouette_right},
    };

    for (const View& view : views) {
      for (std::size_t pi = 0; pi < n_pixels; ++pi) {
        const SampledPixel& px = problem.pixels.pixels[pi];
        const double p_fg = view.mask->at(px.u, px.v);
        const double p_bg = 1.0 - p_fg;
        const SilhouetteResidual res = evaluate_silhouette(
            decoded, model, view.cam_to_obj, *view.cam, Vec2(px.u, px.v), p_fg,
            p_bg, cfg.silhouette, with_jacobians,
            view.windows ? &(*view.windows)[pi] : nullptr);

        *view.energy += res.value * inv_omega;
        const double w_irls = irls_weight(res.value, cfg.eps_irls);
        ne.sum_r_silhouette += res.value;
        ne.sum_weighted_r2 += w_irls * res.value * res.value;

        if (with_jacobians) {
          // Half weight keeps these rows on the same convention as the
          // quadratic blocks below, where J'Wr is half the gradient of w*r^2.
          // With omega = 1/r the reweighted rows would inject the full
          // robust-cost gradient instead, so the assembled b would point along
          // grad(E_sil) + 0.5*grad(E_rest): the solver then stalls or settles
          // at points that are not stationary for the energy it scores
          // candidate steps with.
          const double w = 0.5 * cfg.lambda_silhouette * w_irls * inv_omega;
          ne.H.noalias() += w * res.jacobian.transpose() * res.jacobian;
          ne.b.noalias() += w * res.jacobian.transpose() * res.value;
        }
      }
    }

    // Photometric pass: raycast every host pixel first so the normalization
    // by the surviving pixel count is known before accumulation.
    std::vector<PhotoResidual> photo;
    photo.reserve(n_pixels);
    for (const SampledPixel& px : problem.pixels.pixels) {
      PhotoResidual r = evaluate_photometric(
          decoded, model, cam_to_obj, frame.rig, frame.left, frame.right,
          Vec2(px.u, px.v), cfg.photometric, with_jacobians);
      if (r.valid) photo.push_back(std::move(r));
    }
    ne.photometric_pixels = static_cast<int>(photo.size());
    if (!photo.empty()) {
      const double norm =
          1.0 / (double(photo.size()) *
                 double(patch_pattern(cfg.photometric.pattern_size).size()));
      for (const PhotoResidual& r : photo) {
        for (const PatchPixelTerm& term : r.terms) {
          ne.energy.photometric += norm * r.grad_weight * term.huber_cost;
          if (with_jacobians) {
            const double w = norm * r.grad_weight * term.huber_weight;
            ne.H.noalias() += w * term.jacobian.transpose() * term.jacobian;
            ne.b.noalias() += w * term.jacobian.transpose() * term.residual;
          }
        }
      }
    }
  }

  const auto [r_shape, J_shape] = shape_prior(z, model.sigmas);
  ne.energy.shape = r_shape.squaredNorm();
  const PriorResidual r_trans = translation_prior(cam_to_obj, problem.plane, K);
  ne.energy.translation = r_trans.value * r_trans.value;
  const PriorResidual r_rot = rotation_prior(cam_to_obj, problem.plane, K);
  ne.energy.rotation = r_rot.value * r_rot.value;

  if (with_jacobians) {
    ne.H.noalias() += cfg.lambda_shape * J_shape.transpose() * J_shape;
    ne.b.noalias() += cfg.lambda_shape * J_shape.transpose() * r_shape;
    ne.H.noalias() +=
        cfg.lambda_translation * r_trans.jacobian.transpose() * r_trans.jacobian;
    ne.b.noalias() +=
        cfg.lambda_translation * r_trans.jacobian.transpose() * r_trans.value;
    ne.H.noalias() +=
        cfg.lambda_rotation * r_rot.jacobian.transpose() * r_rot.jacobian;
    ne.b.noalias() += cfg.lambda_rotation * r_rot.jacobian.transpose() * r_rot.value;
  }
  return ne;
}

namespace detail {

inline VecX solve_damped(const MatX& H, const VecX& b, double mu,
                         bool pose_only) {
  const Eigen::Index dim = pose_only ? 6 : H.rows();
  MatX Hd = H.topLeftCorner(dim, dim);
  for (Eigen::Index i = 0; i < dim; ++i) {
    Hd(i, i) += mu * std::max(Hd(i, i), 1e-12);
  }
  VecX step = VecX::Zero(H.rows());
  step.head(dim) = Hd.ldlt().solve(-b.head(dim));
  return step;
}

}  // namespace detail

/// Levenberg-damped Gauss-Newton over pose and shape code. Pose increments
/// are applied on the left of the camera-to-object transform; candidate steps
/// are accepted only when the true energy drops, otherwise the damping grows
/// tenfold, and max_rejects consecutive failures abort the fit as diverged.
inline FitResult gauss_newton_fit(const InstanceProblem& problem,
                                  const SolverConfig& cfg) {
  const ShapeModel& model = *problem.model;
  const int K = model.num_components();

  FitResult result;
  result.instance_id = problem.detection.id;
  result.pixel_count = problem.pixels.size();
  result.code = ShapeCode::Zero(K);

  Pose cam_to_obj = problem.detection.init_pose.inverse();
  if (problem.pixels.empty()) {
    result.status = FitStatus::skipped_occluded;
    result.pose = cam_to_obj.inverse();
    return result;
  }

  ShapeCode z = ShapeCode::Zero(K);
  SdfGrid decoded = decode(model, z);
  // Sample positions are frozen here and reused for every evaluation below,
  // so the whole fit descends a single well-defined energy. The grid box is
  // shared by all shape codes, which keeps the windows valid when z moves.
  const RayWindowSet windows =
      freeze_ray_windows(problem, cam_to_obj, decoded, cfg);
  NormalEquations ne = build_normal_equations(problem, cam_to_obj, z, decoded,
                                              cfg, true, &windows);
  double energy = ne.energy.total(cfg);
  result.trace.push_back(
      {0, energy, ne.sum_r_silhouette, ne.sum_weighted_r2, cfg.mu_init, 0.0});

  double mu = cfg.mu_init;
  result.status = FitStatus::max_iterations;

  for (int iter = 1; iter <= cfg.max_iterations; ++iter) {
    const bool pose_only = iter <= cfg.pose_only_iterations;

    bool accepted = false;
    Pose pose_next;
    ShapeCode z_next;
    SdfGrid decoded_next;
    double energy_next = 0.0;
    double step_norm = 0.0;

    // One trial at the damping carried over from the last accept, then up to
    // max_rejects retries at tenfold escalations. Only when every escalated
    // retry still raises the energy is the fit abandoned as diverged.
    int rejects = 0;
    while (rejects <= cfg.max_rejects) {
      const VecX step = detail::solve_damped(ne.H, ne.b, mu, pose_only);
      step_norm = step.norm();
      if (!step.allFinite()) {
        mu = std::min(mu * 10.0, cfg.mu_max);
        ++rejects;
        continue;
      }
      if (step_norm < cfg.step_tol) {
        result.status = FitStatus::converged;
        result.iterations = iter;
        result.trace.push_back({iter, energy, ne.sum_r_silhouette,
                                ne.sum_weighted_r2, mu, step_norm});
        result.pose = cam_to_obj.inverse();
        result.code = z;
        result.energies = ne.energy;
        return result;
      }

      pose_next = compose(se3_exp(step.head<6>()), cam_to_obj);
      z_next = z + step.tail(K);
      decoded_next = decode(model, z_next);
      const NormalEquations probe = build_normal_equations(
          problem, pose_next, z_next, decoded_next, cfg, false, &windows);
      energy_next = probe.energy.total(cfg);

      if (energy_next < energy) {
        accepted = true;
        // Decay is floored at the initial damping: max_rejects tenfold
        // escalations from there always reach a genuinely short step, so a
        // curved valley cannot exhaust the retry budget merely because a run
        // of accepts drove the damping to nothing.
        mu = std::max(mu * 0.5, cfg.mu_init);
        break;
      }
      mu = std::min(mu * 10.0, cfg.mu_max);
      ++rejects;
    }

    if (!accepted) {
      result.status = FitStatus::diverged;
      result.iterations = iter;
      break;
    }

    cam_to_obj = pose_next;
    z = z_next;
    decoded = std::move(decoded_next);
    ne = build_normal_equations(problem, cam_to_obj, z, decoded, cfg, true,
                                &windows);
    energy = ne.energy.total(cfg);
    result.trace.push_back(
        {iter, energy, ne.sum_r_silhouette, ne.sum_weighted_r2, mu, step_norm});
    result.iterations = iter;

    if (step_norm < cfg.step_tol) {
      result.status = FitStatus::converged;
      break;
    }
  }

  result.pose = cam_to_obj.inverse();
  result.code = z;
  result.energies = ne.energy;
  return result;
}

/// Fits every detection in a frame: builds occlusion masks, samples pixels
/// and runs the per-instance solver, optionally spreading instances over a
/// thread pool. Results keep the detection order.
inline std::vector<FitResult> fit_frame(const StereoFrame& frame,
                                        const std::vector<Detection>& detections,
                                        const ShapeModel& model,
                                        const GroundPlane& plane,
                                        const SolverConfig& cfg,
                                        int threads = 1,
                                        const SamplingParams& sampling = {}) {
  std::vector<InstanceProblem> problems(detections.size());
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const BinaryMask occ = occlusion_mask(detections, static_cast<int>(i),
                                          frame.left.width, frame.left.height);
    problems[i].frame = &frame;
    problems[i].model = &model;
    problems[i].detection = detections[i];
    problems[i].pixels = adaptive_sample(frame.left, detections[i], occ, sampling);
    problems[i].plane = plane;
  }

  std::vector<FitResult> results(problems.size());
  if (threads <= 1 || problems.size() <= 1) {
    for (std::size_t i = 0; i < problems.size(); ++i) {
      results[i] = gauss_newton_fit(problems[i], cfg);
    }
    return results;
  }

  std::vector<std::future<FitResult>> jobs;
  jobs.reserve(problems.size());
  std::size_t launched = 0;
  while (launched < problems.size()) {
    const std::size_t batch =
        std::min<std::size_t>(threads, problems.size() - launched);
    for (std::size_t j = 0; j < batch; ++j) {
      const InstanceProblem& p = problems[launched + j];
      jobs.push_back(std::async(std::launch::async,
                                [&p, &cfg] { return gauss_newton_fit(p, cfg); }));
    }
    for (std::size_t j = 0; j < batch; ++j) {
      results[launched + j] = jobs[launched + j].get();
    }
    launched += batch;
  }
  return results;
}

}  // namespace shapefit
