#pragma once

// Point-based keyframe map and windowed bundle adjustment.
//
// The map stores keyframes (pose + image + features) and world points, each
// point anchored to the keyframe that spawned it and carrying the list of
// keyframes observing it. Covisibility counts between keyframes are kept
// incrementally and drive local-window selection.
//
// Two joint refinements over a window of keyframes are provided:
//  * geometric_ba   — reprojection error of observed pixels, sigma-whitened
//  * photometric_ba — anchor intensity vs. the intensity sampled at the
//                     point's projection into each observing keyframe
//
// Both optimize window poses and observed points together, hold a caller
// chosen subset of keyframes fixed as the gauge, and on success write the
// result back and detach observations whose robust weight collapsed.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rgbdo/common.hpp"
#include "rgbdo/features.hpp"
#include "rgbdo/geometry.hpp"
#include "rgbdo/lie.hpp"
#include "rgbdo/optim.hpp"
#include "rgbdo/trajectory.hpp"

namespace rgbdo::mapping {

// ---------------------------------------------------------------------------
// Map containers

struct Observation {
  int keyframe = -1;
  geom::Pixel pixel;
  double sigma = 1.0;
};

// A word-id -> weight histogram; filled in by the place-recognition layer.
using WordHistogram = std::vector<std::pair<int, double>>;

struct Keyframe {
  int id = -1;
  double timestamp = 0.0;
  lie::Pose pose;  // maps world points into this camera's frame
  geom::RgbdFrame frame;  // may be empty (e.g. a deserialized map)
  geom::Pyramid pyramid;
  std::vector<features::FeaturePoint> features;
  std::optional<WordHistogram> bow;
};

struct MapPoint {
  int id = -1;
  geom::Point3 position = geom::Point3::Zero();  // world frame
  int ref_keyframe = -1;  // anchor: the keyframe that spawned the point
  geom::Pixel ref_pixel;
  double ref_intensity = 0.0;
  features::Descriptor descriptor{};
  bool has_descriptor = false;
  std::vector<Observation> observations;

  const Observation* observation_in(int keyframe_id) const {
    for (const Observation& o : observations)
      if (o.keyframe == keyframe_id) return &o;
    return nullptr;
  }
};

// Keyframes and points with referential integrity maintained on every
// mutation: observations always resolve, covisibility stays symmetric, a
// point's anchor observation is always present, and a point that loses its
// last observation is deleted.
class KeyframeMap {
 public:
  // Inserts and returns the assigned id. A non-negative kf.id is honored if
  // unused (deserialization); otherwise the next free id is assigned.
  int add_keyframe(Keyframe kf) {
    if (kf.id < 0) kf.id = next_keyframe_id_;
    if (keyframes_.count(kf.id)) throw InvalidArgument("add_keyframe: duplicate keyframe id");
    next_keyframe_id_ = std::max(next_keyframe_id_, kf.id + 1);
    const int id = kf.id;
    keyframes_.emplace(id, std::move(kf));
    return id;
  }

  // Inserts a point carrying at least its anchor observation.
  int add_point(MapPoint p) {
    if (p.observations.empty()) throw InvalidArgument("add_point: point has no observations");
    if (!keyframes_.count(p.ref_keyframe))
      throw InvalidArgument("add_point: anchor keyframe does not exist");
    if (!p.observation_in(p.ref_keyframe))
      throw InvalidArgument("add_point: anchor observation missing");
    for (const Observation& o : p.observations)
      if (!keyframes_.count(o.keyframe))
        throw InvalidArgument("add_point: observation references a missing keyframe");
    if (p.id < 0) p.id = next_point_id_;
    if (points_.count(p.id)) throw InvalidArgument("add_point: duplicate point id");
    next_point_id_ = std::max(next_point_id_, p.id + 1);
    for (std::size_t i = 0; i < p.observations.size(); ++i)
      for (std::size_t j = i + 1; j < p.observations.size(); ++j)
        bump_covisibility(p.observations[i].keyframe, p.observations[j].keyframe, +1);
    const int id = p.id;
    points_.emplace(id, std::move(p));
    return id;
  }

  void add_observation(int point_id, const Observation& obs) {
    MapPoint& p = point(point_id);
    if (!keyframes_.count(obs.keyframe))
      throw InvalidArgument("add_observation: keyframe does not exist");
    if (p.observation_in(obs.keyframe))
      throw InvalidArgument("add_observation: point already observed in that keyframe");
    for (const Observation& o : p.observations) bump_covisibility(o.keyframe, obs.keyframe, +1);
    p.observations.push_back(obs);
  }

  // Detaches one observation. The anchor moves to the earliest surviving
  // observation when its own observation goes; a point losing its last
  // observation is erased from the map.
  void remove_observation(int point_id, int keyframe_id) {
    MapPoint& p = point(point_id);
    auto it = std::find_if(p.observations.begin(), p.observations.end(),
                           [&](const Observation& o) { return o.keyframe == keyframe_id; });
    if (it == p.observations.end())
      throw InvalidArgument("remove_observation: point is not observed in that keyframe");
    for (const Observation& o : p.observations)
      if (o.keyframe != keyframe_id) bump_covisibility(o.keyframe, keyframe_id, -1);
    p.observations.erase(it);
    if (p.observations.empty()) {
      points_.erase(point_id);
      return;
    }
    if (p.ref_keyframe == keyframe_id) {
      const Observation& next_anchor = p.observations.front();
      p.ref_keyframe = next_anchor.keyframe;
      p.ref_pixel = next_anchor.pixel;
      const Keyframe& kf = keyframe(next_anchor.keyframe);
      if (kf.frame.intensity.width() > 0) {
        const std::optional<double> v = geom::sample_bilinear(kf.frame.intensity, p.ref_pixel);
        if (v) p.ref_intensity = *v;
      }
    }
  }

  bool has_keyframe(int id) const { return keyframes_.count(id) != 0; }
  bool has_point(int id) const { return points_.count(id) != 0; }

  const Keyframe& keyframe(int id) const {
    auto it = keyframes_.find(id);
    if (it == keyframes_.end()) throw NotFoundError("keyframe id not in map");
    return it->second;
  }
  Keyframe& keyframe(int id) {
    auto it = keyframes_.find(id);
    if (it == keyframes_.end()) throw NotFoundError("keyframe id not in map");
    return it->second;
  }
  const MapPoint& point(int id) const {
    auto it = points_.find(id);
    if (it == points_.end()) throw NotFoundError("point id not in map");
    return it->second;
  }
  MapPoint& point(int id) {
    auto it = points_.find(id);
    if (it == points_.end()) throw NotFoundError("point id not in map");
    return it->second;
  }

  const std::map<int, Keyframe>& keyframes() const { return keyframes_; }
  const std::map<int, MapPoint>& points() const { return points_; }

  int covisibility(int a, int b) const {
    auto it = covisibility_.find(pair_key(a, b));
    return it == covisibility_.end() ? 0 : it->second;
  }

  // Keyframes sharing points with `id`, strongest first (ties: more recent
  // keyframe first).
  std::vector<std::pair<int, int>> covisible_neighbors(int id) const {
    std::vector<std::pair<int, int>> out;  // (keyframe, shared count)
    for (const auto& [key, count] : covisibility_) {
      if (count <= 0) continue;
      if (key.first == id) out.emplace_back(key.second, count);
      else if (key.second == id) out.emplace_back(key.first, count);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first > b.first;
    });
    return out;
  }

  // Rebuild covisibility from the observation lists (used after bulk loads).
  void recompute_covisibility() {
    covisibility_.clear();
    for (const auto& [pid, p] : points_) {
      (void)pid;
      for (std::size_t i = 0; i < p.observations.size(); ++i)
        for (std::size_t j = i + 1; j < p.observations.size(); ++j)
          bump_covisibility(p.observations[i].keyframe, p.observations[j].keyframe, +1);
    }
  }

  // Referential-integrity audit; returns false and a reason on violation.
  bool check_integrity(std::string* why = nullptr) const {
    auto fail = [&](const std::string& msg) {
      if (why) *why = msg;
      return false;
    };
    for (const auto& [pid, p] : points_) {
      if (p.observations.empty()) return fail("point " + std::to_string(pid) + " has no observations");
      if (!keyframes_.count(p.ref_keyframe))
        return fail("point " + std::to_string(pid) + " anchor keyframe missing");
      if (!p.observation_in(p.ref_keyframe))
        return fail("point " + std::to_string(pid) + " anchor observation missing");
      std::set<int> seen;
      for (const Observation& o : p.observations) {
        if (!keyframes_.count(o.keyframe))
          return fail("point " + std::to_string(pid) + " observed in a missing keyframe");
        if (!seen.insert(o.keyframe).second)
          return fail("point " + std::to_string(pid) + " observed twice in one keyframe");
      }
    }
    std::map<std::pair<int, int>, int> expected;
    for (const auto& [pid, p] : points_) {
      (void)pid;
      for (std::size_t i = 0; i < p.observations.size(); ++i)
        for (std::size_t j = i + 1; j < p.observations.size(); ++j)
          ++expected[pair_key(p.observations[i].keyframe, p.observations[j].keyframe)];
    }
    std::map<std::pair<int, int>, int> actual;
    for (const auto& [key, count] : covisibility_)
      if (count != 0) actual[key] = count;
    if (expected != actual) return fail("covisibility counts disagree with observations");
    return true;
  }

 private:
  static std::pair<int, int> pair_key(int a, int b) {
    return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
  }

  void bump_covisibility(int a, int b, int delta) {
    if (a == b) throw InvalidArgument("covisibility: keyframe paired with itself");
    const auto key = pair_key(a, b);
    const int value = (covisibility_[key] += delta);
    if (value < 0) throw InvalidArgument("covisibility: count went negative");
    if (value == 0) covisibility_.erase(key);
  }

  std::map<int, Keyframe> keyframes_;
  std::map<int, MapPoint> points_;
  std::map<std::pair<int, int>, int> covisibility_;
  int next_keyframe_id_ = 0;
  int next_point_id_ = 0;
};

// ---------------------------------------------------------------------------
// Keyframe selection

struct KeyframePolicy {
  double min_translation = 0.1;                            // meters
  double min_rotation = 10.0 * std::numbers::pi / 180.0;   // radians
  double min_tracked_ratio = 0.6;
};

inline geom::Point3 camera_center(const lie::Pose& pose_cw) {
  return -(pose_cw.R.transpose() * pose_cw.t);
}

// A new keyframe is warranted unless some existing keyframe is close in both
// translation and rotation while tracking is still well fed.
inline bool should_insert_keyframe(std::span<const lie::Pose> keyframe_poses,
                                   const lie::Pose& pose_cw, double tracked_ratio,
                                   const KeyframePolicy& policy = {}) {
  if (keyframe_poses.empty()) return true;
  if (tracked_ratio < policy.min_tracked_ratio) return true;
  const geom::Point3 center = camera_center(pose_cw);
  for (const lie::Pose& existing : keyframe_poses) {
    const double translation = (camera_center(existing) - center).norm();
    const double rotation = lie::rotation_angle(existing.R * pose_cw.R.transpose());
    if (translation <= policy.min_translation && rotation <= policy.min_rotation) return false;
  }
  return true;
}

inline bool should_insert_keyframe(const KeyframeMap& map, const lie::Pose& pose_cw,
                                   double tracked_ratio, const KeyframePolicy& policy = {}) {
  std::vector<lie::Pose> poses;
  poses.reserve(map.keyframes().size());
  for (const auto& [id, kf] : map.keyframes()) {
    (void)id;
    poses.push_back(kf.pose);
  }
  return should_insert_keyframe(poses, pose_cw, tracked_ratio, policy);
}

// ---------------------------------------------------------------------------
// Spawning points from a keyframe's features

struct AnchorOptions {
  int max_descriptor_distance = 64;   // Hamming gate for observation reuse
  double max_pixel_distance = 6.0;    // pixels, scaled by the feature's sigma
};

// For every feature of the keyframe: if a map point projects nearby with a
// matching descriptor, append an observation; otherwise, if the feature has
// valid depth, spawn a new point at its backprojection. Returns new point ids.
inline std::vector<int> triangulate_or_anchor(KeyframeMap& map, int keyframe_id,
                                              const AnchorOptions& options = {}) {
  Keyframe& kf = map.keyframe(keyframe_id);
  if (kf.frame.intensity.width() == 0)
    throw InvalidArgument("triangulate_or_anchor: keyframe has no image data");
  const geom::CameraIntrinsics& k = kf.frame.intrinsics;

  struct Candidate {
    int point_id;
    geom::Pixel projected;
  };
  std::vector<Candidate> candidates;
  for (const auto& [pid, p] : map.points()) {
    if (!p.has_descriptor) continue;
    if (p.observation_in(keyframe_id)) continue;
    const geom::Point3 pc = lie::act(kf.pose, p.position);
    if (pc.z() < 1e-9) continue;
    const geom::Pixel uv = geom::project(pc, k);
    if (uv.u < 0.0 || uv.v < 0.0 || uv.u > k.width - 1.0 || uv.v > k.height - 1.0) continue;
    candidates.push_back({pid, uv});
  }

  std::vector<int> spawned;
  std::set<int> claimed;
  for (const features::FeaturePoint& f : kf.features) {
    int best_point = -1;
    int best_distance = options.max_descriptor_distance + 1;
    if (f.has_descriptor) {
      for (const Candidate& c : candidates) {
        if (claimed.count(c.point_id)) continue;
        const double du = c.projected.u - f.pixel.u;
        const double dv = c.projected.v - f.pixel.v;
        if (std::hypot(du, dv) > options.max_pixel_distance * f.sigma) continue;
        const int d = features::hamming_distance(map.point(c.point_id).descriptor, f.descriptor);
        if (d < best_distance) {
          best_distance = d;
          best_point = c.point_id;
        }
      }
    }
    if (best_point >= 0) {
      map.add_observation(best_point, Observation{keyframe_id, f.pixel, f.sigma});
      claimed.insert(best_point);
      continue;
    }
    if (!(f.depth > 0.f)) continue;
    MapPoint p;
    p.position = lie::act(lie::inverse(kf.pose),
                          geom::backproject(f.pixel, f.depth, k, kf.frame.convention));
    p.ref_keyframe = keyframe_id;
    p.ref_pixel = f.pixel;
    p.ref_intensity = geom::sample_bilinear(kf.frame.intensity, f.pixel).value_or(0.0);
    p.descriptor = f.descriptor;
    p.has_descriptor = f.has_descriptor;
    p.observations.push_back(Observation{keyframe_id, f.pixel, f.sigma});
    spawned.push_back(map.add_point(std::move(p)));
  }
  return spawned;
}

// ---------------------------------------------------------------------------
// Local window

// The `size` keyframes most covisible with `current` (current included,
// ties broken toward more recent keyframes), as sorted ids.
inline std::vector<int> local_window(const KeyframeMap& map, int current, int size) {
  if (size < 1) throw InvalidArgument("local_window: size must be positive");
  if (!map.has_keyframe(current)) throw NotFoundError("local_window: unknown keyframe");
  std::vector<std::pair<int, int>> ranked;  // (covisibility, id)
  for (const auto& [id, kf] : map.keyframes()) {
    (void)kf;
    if (id != current) ranked.emplace_back(map.covisibility(current, id), id);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second > b.second;
  });
  std::vector<int> window{current};
  for (int i = 0; i < static_cast<int>(ranked.size()) && i < size - 1; ++i)
    window.push_back(ranked[i].second);
  std::sort(window.begin(), window.end());
  return window;
}

// ---------------------------------------------------------------------------
// Bundle adjustment

struct BaOptions {
  int max_iterations = 20;
  // Huber threshold in residual units: sigma-normalized pixels for the
  // geometric variant, intensity for the photometric one.
  double huber_delta = 2.0;
  // Points observed by fewer window keyframes than this are held fixed: a
  // single in-window view would otherwise absorb its residual entirely and
  // detach the point from its out-of-window support.
  int min_observations_to_move = 2;
  bool fix_points = false;   // optimize poses only
  bool prune = true;         // detach observations whose robust weight collapses
  double prune_weight = 0.1;
};

inline BaOptions photometric_ba_defaults() {
  BaOptions o;
  o.huber_delta = 0.1;
  return o;
}

namespace detail {

// Reprojection of a world point into an observing keyframe, whitened by the
// observation sigma. Two parameter blocks: the keyframe pose and the point.
inline optim::ResidualBlock make_ba_geometric_block(const geom::Pixel& observed, double sigma,
                                                    const geom::CameraIntrinsics& k,
                                                    int pose_block, int point_block) {
  if (!(sigma > 0.0)) throw InvalidArgument("geometric_ba: observation sigma must be positive");
  optim::ResidualBlock block;
  block.block_ids = {pose_block, point_block};
  block.evaluate = [observed, sigma, k, pose_block, point_block](const optim::State& s) {
    optim::ResidualEval ev;
    const lie::Pose& T = s.pose(pose_block);
    const geom::Point3 P = s.euclidean(point_block);
    const geom::Point3 p = lie::act(T, P);
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
    Eigen::Matrix<double, 3, 6> j_pose;
    j_pose.leftCols<3>() = -lie::hat(p);
    j_pose.rightCols<3>() = lie::Mat3::Identity();
    ev.jacobians.push_back((j_proj * j_pose) / sigma);
    ev.jacobians.push_back((j_proj * T.R) / sigma);
    return ev;
  };
  return block;
}

// Intensity of the point's projection into keyframe j against the anchor
// intensity stored on the point. The image raster is captured by pointer and
// must outlive the solve.
inline optim::ResidualBlock make_ba_photometric_block(const RasterF* image,
                                                      double anchor_intensity,
                                                      const geom::CameraIntrinsics& k,
                                                      int pose_block, int point_block) {
  optim::ResidualBlock block;
  block.block_ids = {pose_block, point_block};
  block.evaluate = [image, anchor_intensity, k, pose_block, point_block](const optim::State& s) {
    optim::ResidualEval ev;
    const lie::Pose& T = s.pose(pose_block);
    const geom::Point3 P = s.euclidean(point_block);
    const geom::Point3 p = lie::act(T, P);
    if (p.z() < 1e-9) {
      ev.valid = false;
      return ev;
    }
    const geom::Pixel uv = geom::project(p, k);
    const std::optional<double> intensity = geom::sample_bilinear(*image, uv);
    const std::optional<Eigen::Vector2d> grad = geom::sample_gradient_exact(*image, uv);
    if (!intensity || !grad) {
      ev.valid = false;
      return ev;
    }
    ev.r.resize(1);
    ev.r(0) = *intensity - anchor_intensity;

    const double z_inv = 1.0 / p.z();
    Eigen::Matrix<double, 2, 3> j_proj;
    j_proj << k.fx * z_inv, 0.0, -k.fx * p.x() * z_inv * z_inv, 0.0, k.fy * z_inv,
        -k.fy * p.y() * z_inv * z_inv;
    Eigen::Matrix<double, 3, 6> j_pose;
    j_pose.leftCols<3>() = -lie::hat(p);
    j_pose.rightCols<3>() = lie::Mat3::Identity();
    const Eigen::RowVector3d g_proj = grad->transpose() * j_proj;
    ev.jacobians.push_back(g_proj * j_pose);
    ev.jacobians.push_back(g_proj * T.R);
    return ev;
  };
  return block;
}

struct BaProblem {
  optim::State state;
  std::vector<optim::ResidualBlock> blocks;
  std::map<int, int> pose_block;   // keyframe id -> state block
  std::map<int, int> point_block;  // point id -> state block
  struct BlockOrigin {
    int point_id;
    int keyframe_id;
  };
  std::vector<BlockOrigin> origins;  // parallel to blocks
};

inline BaProblem build_ba_problem(const KeyframeMap& map, const std::vector<int>& window,
                                  const std::vector<int>& fixed, const BaOptions& options,
                                  bool photometric) {
  if (window.empty()) throw InvalidArgument("bundle adjustment: empty keyframe window");
  const std::set<int> window_set(window.begin(), window.end());
  const std::set<int> fixed_set(fixed.begin(), fixed.end());
  for (int id : window_set)
    if (!map.has_keyframe(id)) throw NotFoundError("bundle adjustment: unknown keyframe in window");
  for (int id : fixed_set)
    if (!window_set.count(id))
      throw InvalidArgument("bundle adjustment: fixed keyframe is not in the window");

  BaProblem problem;
  for (int id : window_set) {
    const Keyframe& kf = map.keyframe(id);
    if (photometric && kf.frame.intensity.width() == 0)
      throw InvalidArgument("photometric_ba: keyframe has no image data");
    problem.pose_block[id] = problem.state.add_pose(kf.pose, fixed_set.count(id) != 0);
  }

  for (const auto& [pid, p] : map.points()) {
    int in_window = 0;
    for (const Observation& o : p.observations)
      if (window_set.count(o.keyframe)) ++in_window;
    if (in_window == 0) continue;
    const bool point_free = !options.fix_points && in_window >= options.min_observations_to_move;
    const int point_block = problem.state.add_euclidean(p.position, !point_free);
    problem.point_block[pid] = point_block;
    for (const Observation& o : p.observations) {
      if (!window_set.count(o.keyframe)) continue;
      const bool pose_free = !fixed_set.count(o.keyframe);
      if (!pose_free && !point_free) continue;  // no gradient: constant residual
      const Keyframe& kf = map.keyframe(o.keyframe);
      if (photometric)
        problem.blocks.push_back(make_ba_photometric_block(&kf.frame.intensity, p.ref_intensity,
                                                           kf.frame.intrinsics,
                                                           problem.pose_block[o.keyframe],
                                                           point_block));
      else
        problem.blocks.push_back(make_ba_geometric_block(o.pixel, o.sigma, kf.frame.intrinsics,
                                                         problem.pose_block[o.keyframe],
                                                         point_block));
      problem.origins.push_back({pid, o.keyframe});
    }
  }
  return problem;
}

inline optim::SolveReport run_ba(KeyframeMap& map, const std::vector<int>& window,
                                 const std::vector<int>& fixed, const BaOptions& options,
                                 bool photometric) {
  BaProblem problem = build_ba_problem(map, window, fixed, options, photometric);

  optim::SolverOptions solver;
  solver.max_iterations = options.max_iterations;
  solver.loss.kernel = optim::RobustKernel::kHuber;
  solver.loss.param = options.huber_delta;

  if (fixed.empty()) {
    optim::SolveReport report;
    report.termination = optim::Termination::kNumericFailure;
    report.failure_detail = "no fixed keyframe: gauge freedom leaves the normal equations singular";
    report.residual_count = static_cast<int>(problem.blocks.size());
    const optim::NormalEquations ne =
        optim::compute_normal_equations(problem.blocks, problem.state, solver.loss);
    report.initial_cost = report.final_cost = ne.cost;
    return report;
  }

  optim::SolveReport report = optim::levenberg_marquardt(problem.blocks, problem.state, solver);
  if (report.termination == optim::Termination::kNumericFailure) return report;

  for (const auto& [kf_id, block] : problem.pose_block)
    if (!problem.state.fixed(block)) map.keyframe(kf_id).pose = problem.state.pose(block);
  for (const auto& [pid, block] : problem.point_block)
    if (!problem.state.fixed(block)) map.point(pid).position = problem.state.euclidean(block);

  if (options.prune) {
    std::vector<std::pair<int, int>> detach;  // (point, keyframe)
    for (std::size_t i = 0; i < problem.blocks.size(); ++i) {
      const optim::ResidualEval ev = problem.blocks[i].evaluate(problem.state);
      const double weight =
          ev.valid ? optim::robust_weight(solver.loss, ev.r.norm()) : 0.0;
      if (weight < options.prune_weight)
        detach.emplace_back(problem.origins[i].point_id, problem.origins[i].keyframe_id);
    }
    for (const auto& [pid, kf_id] : detach)
      if (map.has_point(pid)) map.remove_observation(pid, kf_id);
  }
  return report;
}

}  // namespace detail

// Joint refinement of window keyframe poses and the points they observe,
// minimizing sigma-whitened reprojection error. Keyframes listed in `fixed`
// provide the gauge and never move; with none the report is a NUMERIC_FAILURE
// and the map is untouched. On success results are written back and
// observations whose robust weight fell below the prune threshold detach.
inline optim::SolveReport geometric_ba(KeyframeMap& map, const std::vector<int>& window,
                                       const std::vector<int>& fixed,
                                       const BaOptions& options = {}) {
  return detail::run_ba(map, window, fixed, options, false);
}

// As geometric_ba, but minimizing the difference between each point's anchor
// intensity and the intensity sampled at its projection into each observing
// window keyframe. Requires image data on every window keyframe.
inline optim::SolveReport photometric_ba(KeyframeMap& map, const std::vector<int>& window,
                                         const std::vector<int>& fixed,
                                         const BaOptions& options = photometric_ba_defaults()) {
  return detail::run_ba(map, window, fixed, options, true);
}

// ---------------------------------------------------------------------------
// Trajectory export

// Keyframe camera-to-world poses ordered by timestamp.
inline io::Trajectory keyframe_trajectory(const KeyframeMap& map) {
  io::Trajectory out;
  for (const auto& [id, kf] : map.keyframes()) {
    (void)id;
    out.push_back({kf.timestamp, lie::inverse(kf.pose)});
  }
  std::sort(out.begin(), out.end(),
            [](const io::TrajectoryEntry& a, const io::TrajectoryEntry& b) {
              return a.timestamp < b.timestamp;
            });
  return out;
}

// ---------------------------------------------------------------------------
// Serialization
//
// Line-based text dump of the map structure: keyframe poses (rotation written
// as the full row-major matrix so doubles round-trip bit-exactly), features,
// points, and observations. Image payloads are not serialized — a loaded
// map carries empty frames and is suitable for pose-graph work, evaluation,
// and relocalization against stored features, but not for photometric BA.

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, " %.17g", v);
  out += buf;
}

inline void append_float(std::string& out, float v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, " %.9g", static_cast<double>(v));
  out += buf;
}

inline void append_descriptor(std::string& out, const features::Descriptor& d) {
  char buf[24];
  for (std::uint64_t word : d.bits) {
    std::snprintf(buf, sizeof buf, " %016llx", static_cast<unsigned long long>(word));
    out += buf;
  }
}

}  // namespace detail

inline std::string serialize_map(const KeyframeMap& map) {
  std::string out = "# keyframe map: keyframe/feature/bow/point/obs records\n";
  for (const auto& [id, kf] : map.keyframes()) {
    out += "keyframe " + std::to_string(id);
    detail::append_double(out, kf.timestamp);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) detail::append_double(out, kf.pose.R(r, c));
    for (int i = 0; i < 3; ++i) detail::append_double(out, kf.pose.t(i));
    out += "\n";
    for (const features::FeaturePoint& f : kf.features) {
      out += "feature " + std::to_string(id);
      detail::append_double(out, f.pixel.u);
      detail::append_double(out, f.pixel.v);
      out += " " + std::to_string(f.level);
      detail::append_double(out, f.sigma);
      detail::append_double(out, f.score);
      detail::append_float(out, f.depth);
      out += f.has_descriptor ? " 1" : " 0";
      detail::append_descriptor(out, f.descriptor);
      out += "\n";
    }
    if (kf.bow) {
      out += "bow " + std::to_string(id) + " " + std::to_string(kf.bow->size());
      for (const auto& [word, weight] : *kf.bow) {
        out += " " + std::to_string(word);
        detail::append_double(out, weight);
      }
      out += "\n";
    }
  }
  for (const auto& [id, p] : map.points()) {
    out += "point " + std::to_string(id);
    for (int i = 0; i < 3; ++i) detail::append_double(out, p.position(i));
    out += " " + std::to_string(p.ref_keyframe);
    detail::append_double(out, p.ref_pixel.u);
    detail::append_double(out, p.ref_pixel.v);
    detail::append_double(out, p.ref_intensity);
    out += p.has_descriptor ? " 1" : " 0";
    detail::append_descriptor(out, p.descriptor);
    out += "\n";
    for (const Observation& o : p.observations) {
      out += "obs " + std::to_string(id) + " " + std::to_string(o.keyframe);
      detail::append_double(out, o.pixel.u);
      detail::append_double(out, o.pixel.v);
      detail::append_double(out, o.sigma);
      out += "\n";
    }
  }
  return out;
}

inline void save_map(const KeyframeMap& map, const std::string& path) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw NotFoundError("save_map: cannot open " + path);
  file << serialize_map(map);
  if (!file) throw Error("save_map: write failed for " + path);
}

namespace detail {

inline features::Descriptor parse_descriptor(std::istringstream& in, int line) {
  features::Descriptor d{};
  for (std::uint64_t& word : d.bits) {
    std::string tok;
    if (!(in >> tok)) throw ParseError("map: truncated descriptor", line);
    std::size_t used = 0;
    word = std::stoull(tok, &used, 16);
    if (used != tok.size()) throw ParseError("map: bad descriptor word", line);
  }
  return d;
}

}  // namespace detail

inline KeyframeMap parse_map(std::istream& in) {
  KeyframeMap map;
  // Points arrive before their observation lines; buffer and insert whole.
  std::optional<MapPoint> pending;
  auto flush_pending = [&]() {
    if (!pending) return;
    if (pending->observations.empty())
      throw InvalidArgument("map: point " + std::to_string(pending->id) + " has no observations");
    map.add_point(std::move(*pending));
    pending.reset();
  };

  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string what;
    fields >> what;
    if (what == "keyframe") {
      flush_pending();
      Keyframe kf;
      if (!(fields >> kf.id >> kf.timestamp)) throw ParseError("map: bad keyframe line", line_number);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
          if (!(fields >> kf.pose.R(r, c))) throw ParseError("map: bad keyframe line", line_number);
      for (int i = 0; i < 3; ++i)
        if (!(fields >> kf.pose.t(i))) throw ParseError("map: bad keyframe line", line_number);
      if (kf.id < 0) throw ParseError("map: negative keyframe id", line_number);
      if (map.has_keyframe(kf.id)) throw ParseError("map: duplicate keyframe id", line_number);
      map.add_keyframe(std::move(kf));
    } else if (what == "feature") {
      flush_pending();
      int kf_id = -1, level = 0, has_desc = 0;
      features::FeaturePoint f;
      if (!(fields >> kf_id >> f.pixel.u >> f.pixel.v >> level >> f.sigma >> f.score >> f.depth >>
            has_desc))
        throw ParseError("map: bad feature line", line_number);
      f.level = level;
      f.has_descriptor = has_desc != 0;
      f.descriptor = detail::parse_descriptor(fields, line_number);
      if (!map.has_keyframe(kf_id)) throw ParseError("map: feature before its keyframe", line_number);
      map.keyframe(kf_id).features.push_back(f);
    } else if (what == "bow") {
      flush_pending();
      int kf_id = -1;
      std::size_t n = 0;
      if (!(fields >> kf_id >> n)) throw ParseError("map: bad bow line", line_number);
      if (!map.has_keyframe(kf_id)) throw ParseError("map: bow before its keyframe", line_number);
      WordHistogram bow;
      bow.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        int word = 0;
        double weight = 0.0;
        if (!(fields >> word >> weight)) throw ParseError("map: truncated bow line", line_number);
        bow.emplace_back(word, weight);
      }
      map.keyframe(kf_id).bow = std::move(bow);
    } else if (what == "point") {
      flush_pending();
      MapPoint p;
      int has_desc = 0;
      if (!(fields >> p.id >> p.position(0) >> p.position(1) >> p.position(2) >> p.ref_keyframe >>
            p.ref_pixel.u >> p.ref_pixel.v >> p.ref_intensity >> has_desc))
        throw ParseError("map: bad point line", line_number);
      p.has_descriptor = has_desc != 0;
      p.descriptor = detail::parse_descriptor(fields, line_number);
      if (!map.has_keyframe(p.ref_keyframe))
        throw ParseError("map: point before its anchor keyframe", line_number);
      if (map.has_point(p.id) || (pending && pending->id == p.id))
        throw ParseError("map: duplicate point id", line_number);
      pending = std::move(p);
    } else if (what == "obs") {
      int pid = -1;
      Observation o;
      if (!(fields >> pid >> o.keyframe >> o.pixel.u >> o.pixel.v >> o.sigma))
        throw ParseError("map: bad obs line", line_number);
      if (!pending || pending->id != pid)
        throw ParseError("map: obs does not follow its point", line_number);
      if (!map.has_keyframe(o.keyframe))
        throw ParseError("map: obs references a missing keyframe", line_number);
      pending->observations.push_back(o);
    } else {
      throw ParseError("map: unknown record '" + what + "'", line_number);
    }
  }
  flush_pending();
  return map;
}

inline KeyframeMap load_map(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw NotFoundError("load_map: cannot open " + path);
  return parse_map(file);
}

}  // namespace rgbdo::mapping
