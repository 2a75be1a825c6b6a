#pragma once

// Frame-to-frame camera tracking. Four estimators around one convention:
// the unknown is the pose T_cr mapping reference-frame points into the
// current frame, refined by iterated left-multiplicative updates.
//
//  * track_photometric      — dense direct alignment of image intensities,
//                             coarse to fine over the pyramid
//  * track_features         — sparse corner matching plus motion-only
//                             reprojection adjustment
//  * icp_point_to_plane     — depth-only geometric alignment with frozen
//                             per-round associations
//  * track_seeded_photometric — feature alignment as the seed, photometric
//                             refinement for the final estimate
//
// Every estimator reports degeneracy instead of silently returning garbage:
// too little texture, too little overlap, too few inliers, or motion
// directions the data cannot constrain.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rgbdo/common.hpp"
#include "rgbdo/features.hpp"
#include "rgbdo/geometry.hpp"
#include "rgbdo/lie.hpp"
#include "rgbdo/optim.hpp"

namespace rgbdo::track {

// ---------------------------------------------------------------------------
// Residual factories. Each returns a block over a single pose parameter.
// Rasters and normal maps are captured by pointer: the caller keeps them
// alive for the lifetime of the returned block.

// Photometric residual of one reference pixel with known depth:
//   r = I_cur(pi(T * X_ref)) - I_ref(p)
// Invalid when the point leaves the current view or lands where intensity
// or gradient cannot be sampled.
inline optim::ResidualBlock make_photometric_block(const geom::PyramidLevel* ref,
                                                   const geom::PyramidLevel* cur,
                                                   geom::DepthConvention convention, int px,
                                                   int py, double depth, int pose_block) {
  const geom::Point3 x_ref = geom::backproject(geom::Pixel(px, py), depth, ref->intrinsics,
                                               convention);
  const double i_ref = ref->intensity(px, py);
  optim::ResidualBlock block;
  block.block_ids = {pose_block};
  block.evaluate = [ref, cur, x_ref, i_ref, pose_block](const optim::State& s) {
    optim::ResidualEval ev;
    const lie::Pose& T = s.pose(pose_block);
    const geom::Point3 p = lie::act(T, x_ref);
    if (p.z() < 1e-9) {
      ev.valid = false;
      return ev;
    }
    geom::Pixel uv;
    try {
      uv = geom::project(p, cur->intrinsics);
    } catch (const BehindCameraError&) {
      ev.valid = false;
      return ev;
    }
    const std::optional<double> intensity = geom::sample_bilinear(cur->intensity, uv);
    const std::optional<Eigen::Vector2d> grad = geom::sample_gradient_exact(cur->intensity, uv);
    if (!intensity || !grad) {
      ev.valid = false;
      return ev;
    }

    ev.r.resize(1);
    ev.r(0) = *intensity - i_ref;

    const double z_inv = 1.0 / p.z();
    Eigen::Matrix<double, 2, 3> j_proj;
    j_proj << cur->intrinsics.fx * z_inv, 0.0, -cur->intrinsics.fx * p.x() * z_inv * z_inv, 0.0,
        cur->intrinsics.fy * z_inv, -cur->intrinsics.fy * p.y() * z_inv * z_inv;
    Eigen::Matrix<double, 3, 6> j_point;
    j_point.leftCols<3>() = -lie::hat(p);
    j_point.rightCols<3>() = lie::Mat3::Identity();
    ev.jacobians.push_back(grad->transpose() * j_proj * j_point);
    return ev;
  };
  return block;
}

// Whitened reprojection residual of a known 3D point in the reference frame
// observed at a pixel of the current image:
//   r = (pi(T * P_ref) - observed) / sigma
inline optim::ResidualBlock make_reprojection_block(const geom::Point3& point_ref,
                                                    const geom::Pixel& observed, double sigma,
                                                    const geom::CameraIntrinsics& k,
                                                    int pose_block) {
  if (!(sigma > 0.0)) throw InvalidArgument("make_reprojection_block: sigma must be positive");
  optim::ResidualBlock block;
  block.block_ids = {pose_block};
  block.evaluate = [point_ref, observed, sigma, k, pose_block](const optim::State& s) {
    optim::ResidualEval ev;
    const geom::Point3 p = lie::act(s.pose(pose_block), point_ref);
    if (p.z() < 1e-9) {
      ev.valid = false;
      return ev;
    }
    const geom::Pixel uv = geom::project(p, k);
    ev.r.resize(2);
    ev.r(0) = (uv.u - observed.u) / sigma;
    ev.r(1) = (uv.v - observed.v) / sigma;

    const double z_inv = 1.0 / p.z();
    Eigen::Matrix<double, 2, 3> j_proj;
    j_proj << k.fx * z_inv, 0.0, -k.fx * p.x() * z_inv * z_inv, 0.0, k.fy * z_inv,
        -k.fy * p.y() * z_inv * z_inv;
    Eigen::Matrix<double, 3, 6> j_point;
    j_point.leftCols<3>() = -lie::hat(p);
    j_point.rightCols<3>() = lie::Mat3::Identity();
    ev.jacobians.push_back((j_proj * j_point) / sigma);
    return ev;
  };
  return block;
}

// 3D point-to-point residual: r = T * p_src - p_dst.
inline optim::ResidualBlock make_point_alignment_block(const geom::Point3& p_src,
                                                       const geom::Point3& p_dst,
                                                       int pose_block) {
  optim::ResidualBlock block;
  block.block_ids = {pose_block};
  block.evaluate = [p_src, p_dst, pose_block](const optim::State& s) {
    optim::ResidualEval ev;
    const geom::Point3 p = lie::act(s.pose(pose_block), p_src);
    ev.r = p - p_dst;
    Eigen::MatrixXd j(3, 6);
    j.leftCols<3>() = -lie::hat(p);
    j.rightCols<3>() = lie::Mat3::Identity();
    ev.jacobians.push_back(std::move(j));
    return ev;
  };
  return block;
}

// Signed point-to-plane residual with a frozen association: the current
// frame point q_cur is pulled through T^-1 onto the reference surface point
// p_ref with unit normal n_ref:
//   r = n_ref . (T^-1 * q_cur - p_ref)
inline optim::ResidualBlock make_point_to_plane_block(const geom::Point3& q_cur,
                                                      const geom::Point3& p_ref,
                                                      const lie::Vec3& n_ref, int pose_block) {
  optim::ResidualBlock block;
  block.block_ids = {pose_block};
  block.evaluate = [q_cur, p_ref, n_ref, pose_block](const optim::State& s) {
    optim::ResidualEval ev;
    const lie::Pose& T = s.pose(pose_block);
    const lie::Vec3 x = T.R.transpose() * (q_cur - T.t);
    ev.r.resize(1);
    ev.r(0) = n_ref.dot(x - p_ref);
    Eigen::MatrixXd j(1, 6);
    j.leftCols<3>() = n_ref.transpose() * T.R.transpose() * lie::hat(q_cur);
    j.rightCols<3>() = -n_ref.transpose() * T.R.transpose();
    ev.jacobians.push_back(std::move(j));
    return ev;
  };
  return block;
}

// ---------------------------------------------------------------------------
// Common result type

struct TrackResult {
  lie::Pose pose;                 // current-from-reference
  bool degenerate = false;
  std::string failure_reason;
  double valid_fraction = 0.0;    // usable residuals at the final state
  int inliers = 0;
  std::vector<optim::SolveReport> reports;   // one per solved stage
  lie::Mat6 final_hessian = lie::Mat6::Zero();
  std::vector<std::string> notes;

  bool ok() const { return !degenerate; }
};

// ---------------------------------------------------------------------------
// Dense photometric tracking

struct PhotometricOptions {
  double huber_delta = 0.1;              // intensity units
  double gradient_keep_fraction = 0.25;  // strongest-gradient share per level
  int max_points_per_level = 6000;
  int min_points = 30;
  double min_valid_fraction = 0.3;       // required overlap at the finest level
  int max_iterations_per_level = 30;
  double step_tolerance = 1e-9;
};

struct SelectedPixel {
  int x = 0;
  int y = 0;
  double depth = 0.0;
  double gradient = 0.0;
};

// Pixels worth spending photometric residuals on: valid depth, full sampling
// margin, and gradient magnitude in the top `keep_fraction` of the level.
inline std::vector<SelectedPixel> select_high_gradient_pixels(const geom::PyramidLevel& level,
                                                              double keep_fraction,
                                                              int max_points) {
  std::vector<SelectedPixel> all;
  const RasterF& img = level.intensity;
  for (int y = 2; y < img.height() - 2; ++y) {
    for (int x = 2; x < img.width() - 2; ++x) {
      const float d = level.depth(x, y);
      if (d <= 0.f) continue;
      const std::optional<Eigen::Vector2d> g = geom::sample_gradient(img, geom::Pixel(x, y));
      if (!g) continue;
      const double mag = g->norm();
      if (mag <= 0.0) continue;
      all.push_back({x, y, d, mag});
    }
  }
  if (all.empty()) return all;
  std::sort(all.begin(), all.end(), [](const SelectedPixel& a, const SelectedPixel& b) {
    if (a.gradient != b.gradient) return a.gradient > b.gradient;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  const std::size_t quota = static_cast<std::size_t>(
      std::clamp<double>(std::llround(all.size() * keep_fraction), 1.0,
                         static_cast<double>(max_points)));
  if (all.size() > quota) all.resize(quota);
  return all;
}

// Coarse-to-fine direct alignment. Starts from `initial` (current-from-
// reference) and walks the pyramid from the coarsest to the finest level,
// re-solving with a robustified photometric objective at each level.
inline TrackResult track_photometric(const geom::Pyramid& reference, const geom::Pyramid& current,
                                     const lie::Pose& initial = lie::Pose::Identity(),
                                     const PhotometricOptions& options = {}) {
  if (reference.level_count() != current.level_count())
    throw InvalidArgument("track_photometric: pyramids must have the same depth");
  TrackResult result;
  result.pose = initial;

  optim::SolverOptions solver;
  solver.max_iterations = options.max_iterations_per_level;
  solver.step_tolerance = options.step_tolerance;
  solver.loss.kernel = optim::RobustKernel::kHuber;
  solver.loss.param = options.huber_delta;

  for (int level = reference.level_count() - 1; level >= 0; --level) {
    const geom::PyramidLevel& ref = reference.level(level);
    const geom::PyramidLevel& cur = current.level(level);
    const std::vector<SelectedPixel> selected = select_high_gradient_pixels(
        ref, options.gradient_keep_fraction, options.max_points_per_level);
    if (static_cast<int>(selected.size()) < options.min_points) {
      result.degenerate = true;
      std::ostringstream msg;
      msg << "level " << level << ": only " << selected.size()
          << " textured pixels with depth (need " << options.min_points << ")";
      result.failure_reason = msg.str();
      return result;
    }

    optim::State state;
    const int pose_id = state.add_pose(result.pose);
    std::vector<optim::ResidualBlock> blocks;
    blocks.reserve(selected.size());
    for (const SelectedPixel& s : selected)
      blocks.push_back(
          make_photometric_block(&ref, &cur, reference.convention, s.x, s.y, s.depth, pose_id));

    optim::SolveReport report = optim::levenberg_marquardt(blocks, state, solver);
    result.pose = state.pose(pose_id);
    const bool finest = level == 0;
    if (finest) {
      const optim::NormalEquations ne = optim::compute_normal_equations(blocks, state, solver.loss);
      result.valid_fraction = static_cast<double>(ne.valid_count) / blocks.size();
      result.final_hessian = ne.H;
      result.inliers = ne.valid_count;
    }
    result.reports.push_back(std::move(report));

    if (result.reports.back().termination == optim::Termination::kNumericFailure) {
      result.degenerate = true;
      result.failure_reason =
          "optimizer failed at level " + std::to_string(level) + ": " +
          result.reports.back().failure_detail;
      return result;
    }
  }

  if (result.valid_fraction < options.min_valid_fraction) {
    result.degenerate = true;
    std::ostringstream msg;
    msg << "only " << result.valid_fraction * 100.0
        << "% of selected pixels stayed in view at the finest level";
    result.failure_reason = msg.str();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Closed-form and iterative 3D-3D alignment

// Least-squares rigid alignment (src -> dst). DegenerateError when there are
// fewer than 3 pairs or the point sets do not determine a unique rotation.
inline lie::Pose align_3d_closed_form(const std::vector<geom::Point3>& src,
                                      const std::vector<geom::Point3>& dst) {
  if (src.size() != dst.size())
    throw InvalidArgument("align_3d_closed_form: size mismatch");
  if (src.size() < 3)
    throw DegenerateError("align_3d_closed_form: need at least 3 point pairs");
  const lie::PointAlignment alignment = lie::rigid_align_points(src, dst);
  if (alignment.conditioning < 1e-9)
    throw DegenerateError("align_3d_closed_form: point configuration does not fix the rotation");
  return alignment.pose;
}

struct AlignmentOptions {
  double huber_delta = 0.02;       // meters, first-stage kernel
  double inlier_threshold = 0.05;  // meters; also the second-stage Tukey cutoff
  int max_iterations = 20;
  int min_inliers = 6;
};

// Robust iterative refinement of a 3D-3D alignment from an initial guess.
// Two IRLS stages: a Huber pass pulls the estimate into the inlier basin, then
// a Tukey pass (cutoff = inlier_threshold) zeroes the residual influence of
// outliers so clean correspondences are fit without bias.
inline TrackResult refine_3d_alignment(const std::vector<geom::Point3>& src,
                                       const std::vector<geom::Point3>& dst,
                                       const lie::Pose& initial,
                                       const AlignmentOptions& options = {}) {
  if (src.size() != dst.size()) throw InvalidArgument("refine_3d_alignment: size mismatch");
  TrackResult result;
  result.pose = initial;
  if (src.empty()) {
    result.degenerate = true;
    result.failure_reason = "no point pairs";
    return result;
  }

  optim::State state;
  const int pose_id = state.add_pose(initial);
  std::vector<optim::ResidualBlock> blocks;
  blocks.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i)
    blocks.push_back(make_point_alignment_block(src[i], dst[i], pose_id));

  optim::SolverOptions solver;
  solver.max_iterations = options.max_iterations;
  solver.loss.kernel = optim::RobustKernel::kHuber;
  solver.loss.param = options.huber_delta;
  result.reports.push_back(optim::levenberg_marquardt(blocks, state, solver));

  solver.loss.kernel = optim::RobustKernel::kTukey;
  solver.loss.param = options.inlier_threshold;
  result.reports.push_back(optim::levenberg_marquardt(blocks, state, solver));
  result.pose = state.pose(pose_id);

  const optim::NormalEquations ne = optim::compute_normal_equations(blocks, state, solver.loss);
  result.final_hessian = ne.H;
  int inliers = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double e = (lie::act(result.pose, src[i]) - dst[i]).norm();
    if (e < options.inlier_threshold) ++inliers;
  }
  result.inliers = inliers;
  result.valid_fraction = static_cast<double>(inliers) / src.size();
  if (inliers < options.min_inliers) {
    result.degenerate = true;
    std::ostringstream msg;
    msg << "only " << inliers << " alignment inliers under " << options.inlier_threshold
        << " m (need " << options.min_inliers << ")";
    result.failure_reason = msg.str();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Sparse feature tracking (motion-only reprojection adjustment)

struct MotionOnlyOptions {
  double huber_delta = 2.0;  // units of the per-observation sigma
  int max_iterations = 30;
  int min_inliers = 6;
};

// Refines T_cr given 3D points in the reference frame and their pixel
// observations in the current image. An observation is an inlier when its
// robust weight at the solution is at least one half.
inline TrackResult motion_only_ba(const std::vector<geom::Point3>& points_ref,
                                  const std::vector<geom::Pixel>& observations,
                                  const std::vector<double>& sigmas,
                                  const geom::CameraIntrinsics& k, const lie::Pose& initial,
                                  const MotionOnlyOptions& options = {}) {
  if (points_ref.size() != observations.size() || points_ref.size() != sigmas.size())
    throw InvalidArgument("motion_only_ba: size mismatch");
  TrackResult result;
  result.pose = initial;
  if (points_ref.size() < 3) {
    result.degenerate = true;
    result.failure_reason = "fewer than 3 point observations";
    return result;
  }

  optim::State state;
  const int pose_id = state.add_pose(initial);
  std::vector<optim::ResidualBlock> blocks;
  blocks.reserve(points_ref.size());
  for (std::size_t i = 0; i < points_ref.size(); ++i)
    blocks.push_back(make_reprojection_block(points_ref[i], observations[i], sigmas[i], k,
                                             pose_id));

  optim::SolverOptions solver;
  solver.max_iterations = options.max_iterations;
  solver.loss.kernel = optim::RobustKernel::kHuber;
  solver.loss.param = options.huber_delta;
  result.reports.push_back(optim::levenberg_marquardt(blocks, state, solver));
  result.pose = state.pose(pose_id);

  const optim::NormalEquations ne = optim::compute_normal_equations(blocks, state, solver.loss);
  result.final_hessian = ne.H;
  int inliers = 0;
  for (const optim::ResidualBlock& b : blocks) {
    const optim::ResidualEval ev = b.evaluate(state);
    if (!ev.valid) continue;
    if (optim::robust_weight(solver.loss, ev.r.norm()) >= 0.5) ++inliers;
  }
  result.inliers = inliers;
  result.valid_fraction = static_cast<double>(ne.valid_count) / blocks.size();
  if (inliers < options.min_inliers) {
    result.degenerate = true;
    std::ostringstream msg;
    msg << "only " << inliers << " reprojection inliers (need " << options.min_inliers << ")";
    result.failure_reason = msg.str();
  }
  if (result.reports.back().termination == optim::Termination::kNumericFailure) {
    result.degenerate = true;
    result.failure_reason = "optimizer failed: " + result.reports.back().failure_detail;
  }
  return result;
}

struct FeatureTrackOptions {
  features::DetectorOptions detector;
  features::MatchOptions matcher;
  MotionOnlyOptions motion;
};

struct FeatureTrackResult {
  TrackResult track;
  int detected_reference = 0;
  int detected_current = 0;
  int matched = 0;
  int with_depth = 0;
};

// Turns corner matches with reference depth into a motion-only adjustment.
inline FeatureTrackResult track_features(const geom::Pyramid& reference,
                                         const geom::Pyramid& current,
                                         const lie::Pose& initial = lie::Pose::Identity(),
                                         const FeatureTrackOptions& options = {}) {
  FeatureTrackResult out;
  const std::vector<features::FeaturePoint> ref_pts =
      features::detect(reference, options.detector);
  const std::vector<features::FeaturePoint> cur_pts = features::detect(current, options.detector);
  out.detected_reference = static_cast<int>(ref_pts.size());
  out.detected_current = static_cast<int>(cur_pts.size());

  std::vector<features::Descriptor> ref_desc, cur_desc;
  std::vector<int> ref_idx, cur_idx;
  for (std::size_t i = 0; i < ref_pts.size(); ++i)
    if (ref_pts[i].has_descriptor) {
      ref_desc.push_back(ref_pts[i].descriptor);
      ref_idx.push_back(static_cast<int>(i));
    }
  for (std::size_t i = 0; i < cur_pts.size(); ++i)
    if (cur_pts[i].has_descriptor) {
      cur_desc.push_back(cur_pts[i].descriptor);
      cur_idx.push_back(static_cast<int>(i));
    }
  const auto matches = features::match(ref_desc, cur_desc, options.matcher);
  out.matched = static_cast<int>(matches.size());

  const geom::CameraIntrinsics& k_ref = reference.level(0).intrinsics;
  const geom::CameraIntrinsics& k_cur = current.level(0).intrinsics;
  std::vector<geom::Point3> points;
  std::vector<geom::Pixel> obs;
  std::vector<double> sigmas;
  for (const auto& [i, j] : matches) {
    const features::FeaturePoint& r = ref_pts[ref_idx[i]];
    const features::FeaturePoint& c = cur_pts[cur_idx[j]];
    if (r.depth <= 0.f) continue;
    points.push_back(geom::backproject(r.pixel, r.depth, k_ref, reference.convention));
    obs.push_back(c.pixel);
    sigmas.push_back(c.sigma);
  }
  out.with_depth = static_cast<int>(points.size());

  out.track = motion_only_ba(points, obs, sigmas, k_cur, initial, options.motion);
  return out;
}

// ---------------------------------------------------------------------------
// Point-to-plane ICP

struct IcpOptions {
  int max_outer_iterations = 10;  // association rounds
  int max_inner_iterations = 5;   // solver iterations per round
  double max_pair_distance = 0.1;                        // meters
  double max_normal_angle = 30.0 * std::numbers::pi / 180.0;
  int max_points = 1500;
  int min_pairs = 12;
  double huber_delta = 0.01;      // meters
  double condition_limit = 1e9;   // Hessian eigenvalue ratio before "sliding"
  double convergence_translation = 1e-7;
  double convergence_rotation = 1e-7;
};

// Depth-only alignment: associates current-frame points with reference
// surface points by projective lookup, solves with the associations frozen,
// re-associates, and repeats. Association pairs must agree in position and
// in normal direction; a solution whose Hessian has near-null directions is
// flagged degenerate (typical for a single plane, which cannot constrain
// in-plane sliding).
inline TrackResult icp_point_to_plane(const geom::RgbdFrame& reference,
                                      const geom::RgbdFrame& current,
                                      const lie::Pose& initial = lie::Pose::Identity(),
                                      const IcpOptions& options = {}) {
  TrackResult result;
  result.pose = initial;

  const geom::NormalMap ref_normals = geom::compute_normals(reference);
  const geom::NormalMap cur_normals = geom::compute_normals(current);

  // Subsample the current frame to at most max_points candidates.
  const int w = current.depth.width(), h = current.depth.height();
  int stride = 1;
  while ((w / stride) * (h / stride) > options.max_points) ++stride;

  struct Candidate {
    geom::Point3 q_cur;
    lie::Vec3 n_cur;
  };
  std::vector<Candidate> candidates;
  for (int y = 0; y < h; y += stride)
    for (int x = 0; x < w; x += stride) {
      const float d = current.depth(x, y);
      if (d <= 0.f || !cur_normals.is_valid(x, y)) continue;
      candidates.push_back({geom::backproject(geom::Pixel(x, y), d, current.intrinsics,
                                              current.convention),
                            cur_normals.normal(x, y)});
    }

  optim::SolverOptions solver;
  solver.max_iterations = options.max_inner_iterations;
  solver.loss.kernel = optim::RobustKernel::kHuber;
  solver.loss.param = options.huber_delta;

  const double cos_limit = std::cos(options.max_normal_angle);
  std::vector<optim::ResidualBlock> blocks;
  optim::State state;
  int pose_id = -1;
  for (int round = 0; round < options.max_outer_iterations; ++round) {
    const lie::Pose T_rc = lie::inverse(result.pose);
    blocks.clear();
    state = optim::State();
    pose_id = state.add_pose(result.pose);

    for (const Candidate& c : candidates) {
      const lie::Vec3 x_ref = lie::act(T_rc, c.q_cur);
      if (x_ref.z() < 1e-9) continue;
      const geom::Pixel uv = geom::project(x_ref, reference.intrinsics);
      const int px = static_cast<int>(std::lround(uv.u));
      const int py = static_cast<int>(std::lround(uv.v));
      if (!reference.depth.in_bounds(px, py)) continue;
      const float d_ref = reference.depth(px, py);
      if (d_ref <= 0.f || !ref_normals.is_valid(px, py)) continue;
      const geom::Point3 p_ref = geom::backproject(geom::Pixel(px, py), d_ref,
                                                   reference.intrinsics, reference.convention);
      if ((x_ref - p_ref).norm() > options.max_pair_distance) continue;
      const lie::Vec3 n_ref = ref_normals.normal(px, py);
      if ((T_rc.R * c.n_cur).dot(n_ref) < cos_limit) continue;
      blocks.push_back(make_point_to_plane_block(c.q_cur, p_ref, n_ref, pose_id));
    }

    if (static_cast<int>(blocks.size()) < options.min_pairs) {
      result.degenerate = true;
      std::ostringstream msg;
      msg << "round " << round << ": only " << blocks.size() << " surface pairs (need "
          << options.min_pairs << ")";
      result.failure_reason = msg.str();
      result.inliers = static_cast<int>(blocks.size());
      return result;
    }

    result.reports.push_back(optim::levenberg_marquardt(blocks, state, solver));
    const lie::Pose refined = state.pose(pose_id);
    const double dt = lie::translation_distance(refined, result.pose);
    const double dr = lie::rotation_distance(refined, result.pose);
    result.pose = refined;
    result.inliers = static_cast<int>(blocks.size());
    if (result.reports.back().termination == optim::Termination::kNumericFailure) {
      result.degenerate = true;
      result.failure_reason = "optimizer failed: " + result.reports.back().failure_detail;
      return result;
    }
    if (dt < options.convergence_translation && dr < options.convergence_rotation) break;
  }

  const optim::NormalEquations ne = optim::compute_normal_equations(blocks, state, solver.loss);
  result.final_hessian = ne.H;
  result.valid_fraction = blocks.empty() ? 0.0
                                         : static_cast<double>(ne.valid_count) / blocks.size();
  const Eigen::SelfAdjointEigenSolver<lie::Mat6> eigen(result.final_hessian);
  const double lambda_min = eigen.eigenvalues().minCoeff();
  const double lambda_max = eigen.eigenvalues().maxCoeff();
  if (!(lambda_max > 0.0) || lambda_min < lambda_max / options.condition_limit) {
    result.degenerate = true;
    std::ostringstream msg;
    msg << "geometry does not constrain all motion directions (eigenvalue ratio "
        << (lambda_min > 0.0 ? lambda_max / lambda_min : std::numeric_limits<double>::infinity())
        << ")";
    result.failure_reason = msg.str();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Feature-seeded photometric tracking

struct SeededOptions {
  FeatureTrackOptions feature;
  AlignmentOptions alignment;
  PhotometricOptions photometric;
};

// Aligns matched corners with depth on both sides in closed form, refines
// that alignment robustly, and hands the result to the dense tracker as its
// starting point. Falls back to `initial` when the seed cannot be built.
inline TrackResult track_seeded_photometric(const geom::Pyramid& reference,
                                            const geom::Pyramid& current,
                                            const lie::Pose& initial = lie::Pose::Identity(),
                                            const SeededOptions& options = {}) {
  const std::vector<features::FeaturePoint> ref_pts =
      features::detect(reference, options.feature.detector);
  const std::vector<features::FeaturePoint> cur_pts =
      features::detect(current, options.feature.detector);

  std::vector<features::Descriptor> ref_desc, cur_desc;
  std::vector<int> ref_idx, cur_idx;
  for (std::size_t i = 0; i < ref_pts.size(); ++i)
    if (ref_pts[i].has_descriptor) {
      ref_desc.push_back(ref_pts[i].descriptor);
      ref_idx.push_back(static_cast<int>(i));
    }
  for (std::size_t i = 0; i < cur_pts.size(); ++i)
    if (cur_pts[i].has_descriptor) {
      cur_desc.push_back(cur_pts[i].descriptor);
      cur_idx.push_back(static_cast<int>(i));
    }
  const auto matches = features::match(ref_desc, cur_desc, options.feature.matcher);

  std::vector<geom::Point3> src, dst;
  for (const auto& [i, j] : matches) {
    const features::FeaturePoint& r = ref_pts[ref_idx[i]];
    const features::FeaturePoint& c = cur_pts[cur_idx[j]];
    if (r.depth <= 0.f || c.depth <= 0.f) continue;
    src.push_back(
        geom::backproject(r.pixel, r.depth, reference.level(0).intrinsics,
                          reference.convention));
    dst.push_back(
        geom::backproject(c.pixel, c.depth, current.level(0).intrinsics, current.convention));
  }

  lie::Pose seed = initial;
  std::string seed_note;
  if (src.size() >= 3) {
    try {
      const lie::Pose closed = align_3d_closed_form(src, dst);
      const TrackResult refined = refine_3d_alignment(src, dst, closed, options.alignment);
      if (!refined.degenerate) {
        seed = refined.pose;
        std::ostringstream note;
        note << "seeded from " << src.size() << " corner pairs, " << refined.inliers
             << " inliers";
        seed_note = note.str();
      } else {
        seed_note = "seed rejected: " + refined.failure_reason;
      }
    } catch (const DegenerateError& e) {
      seed_note = std::string("seed unavailable: ") + e.what();
    }
  } else {
    seed_note = "seed unavailable: too few corner pairs with depth on both sides";
  }

  TrackResult result = track_photometric(reference, current, seed, options.photometric);
  result.notes.insert(result.notes.begin(), seed_note);
  return result;
}

}  // namespace rgbdo::track
